"""metrics.csv in long form plus one SVG bar chart per metric family."""
import csv
import pathlib
import typing

import plotly.graph_objs

import pullseg.data
import pullseg.data.netpbm
import pullseg.model
from pullseg.utils import errors

METRICS_FILE = "metrics.csv"
HEADER = ("run", "step", "metric", "class", "value")

FAMILIES = {
    "similarity": ("cross_domain_similarity",),
    "discrimination": ("ccd", "pdd"),
    "iou": ("iou", "source_iou"),
}


class MetricRow(typing.NamedTuple):
    run: str
    step: int
    metric: str
    cls: typing.Optional[int]
    value: float


def _family_figure(rows: typing.List[MetricRow], title: str):
    figure = plotly.graph_objs.Figure()
    for run, metric in sorted({(r.run, r.metric) for r in rows}):
        selected = [r for r in rows if r.run == run and r.metric == metric]
        last = max(r.step for r in selected)
        selected = sorted((r for r in selected if r.step == last), key=lambda r: r.cls)
        figure.add_trace(
            plotly.graph_objs.Bar(
                x=[f"class {r.cls}" for r in selected],
                y=[r.value for r in selected],
                name=f"{metric} ({run})",
            )
        )
    figure.update_xaxes(title_text="Class")
    figure.update_layout(title_text=title, barmode="group")
    return figure


def emit_report(rows: typing.Iterable[MetricRow], out_dir) -> typing.List[pathlib.Path]:
    """Write metrics.csv and the per-family SVGs; return every path written."""
    rows = list(rows)
    out_dir = pathlib.Path(out_dir)
    written = []
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / METRICS_FILE
        with open(path, "w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(HEADER)
            for row in rows:
                cls = "" if row.cls is None else row.cls
                writer.writerow([row.run, row.step, row.metric, cls, repr(float(row.value))])
        written.append(path)

        for family, metrics in FAMILIES.items():
            members = [r for r in rows if r.metric in metrics and r.cls is not None]
            if not members:
                continue
            svg = out_dir / f"{family}.svg"
            _family_figure(members, family).write_image(str(svg), format="svg")
            written.append(svg)
    except OSError as exc:
        raise errors.IoError(f"cannot write report to {out_dir}: {exc}") from exc
    return written


def read_metrics(path) -> typing.List[MetricRow]:
    path = pathlib.Path(path)
    if path.is_dir():
        path = path / METRICS_FILE
    try:
        with open(path, newline="") as handle:
            reader = csv.reader(handle)
            header = next(reader, None)
            if tuple(header or ()) != HEADER:
                raise errors.FormatError(f"{path}: unexpected header {header}")
            return [
                MetricRow(run, int(step), metric, int(cls) if cls else None, float(value))
                for run, step, metric, cls, value in reader
            ]
    except OSError as exc:
        raise errors.IoError(f"cannot read {path}: {exc}") from exc
    except ValueError as exc:
        raise errors.FormatError(f"{path}: {exc}") from exc


def predictions_dump(params: pullseg.model.ModelParams, images, out_dir) -> typing.List[pathlib.Path]:
    """Colourised argmax maps, one PPM per image."""
    out_dir = pathlib.Path(out_dir)
    written = []
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        for k, image in enumerate(images):
            path = out_dir / f"pred_{k}.ppm"
            colors = pullseg.data.label_to_color(pullseg.model.predict(params, image))
            pullseg.data.netpbm.write_ppm(path, colors)
            written.append(path)
    except OSError as exc:
        raise errors.IoError(f"cannot write predictions to {out_dir}: {exc}") from exc
    return written
