import concurrent.futures
import io
import json
import logging
import re
import zipfile
from io import BytesIO
from pathlib import Path

import pandas as pd
import plotly.graph_objects as go

from src import utils

logger = logging.getLogger(__name__)

FIGURE_FORMATS = ("html", "png", "svg")


# ==============================================================================
# 1. RANKING REPORTS
# ==============================================================================

def write_json(payload, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(utils.clean_for_json(payload), indent=2, sort_keys=True) + "\n")
    return path


def format_report_text(report):
    """Aligned text: the headline metrics, then the per-length breakdown."""
    headline = pd.DataFrame([report.headline()], index=["all"])
    breakdown = report.to_frame()
    breakdown = breakdown[breakdown["bucket"] != "all"].astype({"recall": float, "mrr": float})
    table = breakdown.pivot(index="bucket", columns="k", values=["recall", "mrr"])
    table.columns = [f"{'Recall' if metric == 'recall' else 'MRR'}@{k}" for metric, k in table.columns]
    counts = breakdown.drop_duplicates("bucket").set_index("bucket")["count"]
    table.insert(0, "count", counts)
    table = table.reindex([b for b in ("2", "3", "4", "5", "short", "long") if b in table.index])
    lines = [
        f"split: {report.metadata.get('split', '?')}  variant: {report.metadata.get('variant', '?')}  "
        f"instances: {report.count}",
        headline.to_string(float_format=lambda v: f"{v:.4f}"),
        "",
        table.to_string(float_format=lambda v: f"{v:.4f}", na_rep="-"),
    ]
    return "\n".join(lines) + "\n"


def export_report(report, out_dir, stem="report", emit_csv=False, emit_xlsx=False):
    """Writes <stem>.json and <stem>.txt, plus CSV / Excel on request. Returns the written paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = [write_json(report.to_dict(), out_dir / f"{stem}.json")]
    text_path = out_dir / f"{stem}.txt"
    text_path.write_text(format_report_text(report))
    written.append(text_path)
    if emit_csv:
        csv_path = out_dir / f"{stem}.csv"
        report.to_frame().to_csv(csv_path, index=False, float_format="%.6f")
        written.append(csv_path)
    if emit_xlsx:
        xlsx_path = out_dir / f"{stem}.xlsx"
        xlsx_path.write_bytes(export_to_excel(report=report))
        written.append(xlsx_path)
    logger.info("Wrote %s", ", ".join(str(p) for p in written))
    return written


def export_to_excel(report=None, ablation=None, stats=None):
    """
    Multi-sheet workbook: report breakdown and metadata, ablation mean/SEM/runs,
    corpus statistics. Returns the file bytes, or None when there is nothing to write.
    """
    if report is None and ablation is None and stats is None:
        return None
    output = BytesIO()
    with pd.ExcelWriter(output, engine="openpyxl") as writer:
        if report is not None:
            pd.DataFrame([report.headline()]).to_excel(writer, sheet_name="Summary", index=False)
            report.to_frame().to_excel(writer, sheet_name="By_Length", index=False)
            meta = utils.clean_for_json(report.metadata)
            pd.DataFrame(
                [{"key": k, "value": json.dumps(v) if isinstance(v, (dict, list)) else v} for k, v in sorted(meta.items())]
            ).to_excel(writer, sheet_name="Metadata", index=False)

        if ablation is not None:
            ablation.mean.to_excel(writer, sheet_name="Ablation_Mean")
            ablation.sem.to_excel(writer, sheet_name="Ablation_SEM")
            ablation.runs.to_excel(writer, sheet_name="Ablation_Runs", index=False)

        if stats is not None:
            stats.to_excel(writer, sheet_name="Corpus_Stats")

    return output.getvalue()


def export_ablation(result, out_dir, emit_xlsx=False):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    result.mean.to_csv(out_dir / "ablation_mean.csv", float_format="%.6f")
    result.sem.to_csv(out_dir / "ablation_sem.csv", float_format="%.6f")
    result.runs.to_csv(out_dir / "ablation_runs.csv", index=False, float_format="%.6f")
    write_json({
        "mean": result.mean.to_dict(orient="index"),
        "sem": result.sem.to_dict(orient="index"),
        "runs": result.runs.to_dict(orient="records"),
        "reference": result.reference,
    }, out_dir / "ablation.json")
    text = "\n".join([
        "mean over seeds",
        result.mean.to_string(float_format=lambda v: f"{v:.4f}"),
        "",
        "standard error of the mean",
        result.sem.to_string(float_format=lambda v: f"{v:.4f}"),
    ])
    (out_dir / "ablation.txt").write_text(text + "\n")
    if emit_xlsx:
        (out_dir / "ablation.xlsx").write_bytes(export_to_excel(ablation=result))


# ==============================================================================
# 2. FIGURES
# ==============================================================================

def _convert_figure_to_bytes(fig_obj, image_format):
    """Plotly figure to html text or a static image (static formats go through Kaleido)."""
    if not isinstance(fig_obj, go.Figure):
        return None
    if image_format == "html":
        return fig_obj.to_html(include_plotlyjs="cdn", full_html=True).encode()
    return fig_obj.to_image(format=image_format)


def create_figures_zip_fast(figures_dict, image_formats=FIGURE_FORMATS, max_workers=4):
    """
    Zips {name: figure} in every requested format, converting in parallel.
    Entries are written in sorted order whatever order the conversions finish in.
    """
    tasks = []
    for name, fig_obj in figures_dict.items():
        sanitized = re.sub(r'[\\/*?:"<>|]', "", name)
        for image_format in image_formats:
            tasks.append((f"{image_format}/{sanitized}.{image_format}", fig_obj, image_format))

    converted = {}
    with concurrent.futures.ThreadPoolExecutor(max_workers=max_workers) as executor:
        future_to_filename = {
            executor.submit(_convert_figure_to_bytes, fig_obj, image_format): filename
            for filename, fig_obj, image_format in tasks
        }
        for future in concurrent.futures.as_completed(future_to_filename):
            filename = future_to_filename[future]
            try:
                data = future.result()
                if data:
                    converted[filename] = data
            except Exception as exc:
                logger.warning("Failed to export figure '%s': %s", filename, exc)

    zip_buffer = io.BytesIO()
    with zipfile.ZipFile(zip_buffer, "w", zipfile.ZIP_DEFLATED) as zip_file:
        for filename in sorted(converted):
            zip_file.writestr(filename, converted[filename])
    return zip_buffer.getvalue()
