# src/generate_report.py
"""
Report writers: per-task metric reports, the consolidated ablation CSV and a
Markdown summary. Run directly to rebuild the table of an ablation directory
from its persisted cells.
"""

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Sequence

from src.boottod.ablation import CSV_COLUMNS, CellResult, summarize
from src.boottod.metrics import MetricsReport

logger = logging.getLogger(__name__)


def write_metrics_report(report: MetricsReport, output_dir, stem: str = None) -> Dict[str, Path]:
    """JSON + CSV copies of one report"""
    stem = stem or f"{report.task}_report"
    output_dir = Path(output_dir)
    paths = {
        "json": report.save_json(output_dir / f"{stem}.json"),
        "csv": report.save_csv(output_dir / f"{stem}.csv"),
    }
    logger.info(f"✅ Wrote {report.task} report to {paths['json']}")
    return paths


def write_ablation_csv(rows: Sequence[dict], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({
                **row,
                "mean": repr(row["mean"]),
                "std": repr(row["std"]),
            })
    return path


def create_markdown_report(rows: Sequence[dict]) -> str:
    """
    One table per metric, settings in run order.
    """
    if not rows:
        return "# Ablation Report\n\nNo finished cells found."

    axis = rows[0]["axis"]
    report = f"# Ablation Report: {axis}\n\n"
    metrics: Dict[str, List[dict]] = {}
    for row in rows:
        metrics.setdefault(row["metric"], []).append(row)

    for metric, metric_rows in metrics.items():
        report += f"## {metric}\n\n"
        report += "| setting | mean | std | seeds |\n|---|---|---|---|\n"
        for row in metric_rows:
            report += f"| {row['setting']} | {row['mean']:.4f} | {row['std']:.4f} | {row['n']} |\n"
        report += "\n"
    return report


def save_report_to_file(report_content: str, output_dir, file_name: str = "ablation_report.md") -> Path:
    """
    Saves the generated report to a file.
    """
    file_path = Path(output_dir) / file_name
    try:
        file_path.parent.mkdir(parents=True, exist_ok=True)
        with open(file_path, "w", encoding="utf-8") as f:
            f.write(report_content)
        logger.info(f"Successfully saved report to {file_path}")
    except OSError as e:
        logger.error(f"Error saving report file: {e}")
        raise
    return file_path


def load_cell_results(ablation_dir) -> List[CellResult]:
    """Persisted cells in the order the ablation table was written (setting, then seed)"""
    cells_dir = Path(ablation_dir) / "cells"
    results = []
    for path in cells_dir.glob("*.json"):
        with open(path, encoding="utf-8") as f:
            results.append(CellResult(**json.load(f)))
    return sorted(results, key=lambda r: (r.order, r.seed, r.setting))


def main(argv=None) -> int:
    """
    Rebuild ablation.csv and ablation_report.md from an ablation directory.
    """
    logging.basicConfig(level=logging.INFO, format='%(asctime)s | %(levelname)s | %(name)s | %(message)s')
    parser = argparse.ArgumentParser(description="Rebuild the ablation table from persisted cells")
    parser.add_argument("ablation_dir", help="Directory written by `main.py ablate`")
    args = parser.parse_args(argv)

    results = load_cell_results(args.ablation_dir)
    if not results:
        logger.error(f"❌ No cell results under {args.ablation_dir}/cells")
        return 2

    rows = summarize(results)
    write_ablation_csv(rows, Path(args.ablation_dir) / "ablation.csv")
    save_report_to_file(create_markdown_report(rows), args.ablation_dir)
    logger.info("Report generation complete.")
    return 0


if __name__ == "__main__":
    sys.exit(main())
