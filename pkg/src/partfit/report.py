"""Report rendering: delimited tables, aligned text summaries, and
matplotlib figures written alongside them.

The primary TSV holds only seed-deterministic values (chamfer distances,
sample counts) so identical runs produce identical bytes; wall-clock
timings go to a separate file.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from .baseline import EvalRow  # noqa: E402

CD_SCALE = 100.0  # tables report chamfer distances multiplied by 10^2


def write_eval_tables(outdir, rows: list[EvalRow], info: dict) -> dict:
    """Write eval.tsv (deterministic), timings.tsv, and eval.txt."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    paths = {}

    eval_tsv = outdir / "eval.tsv"
    with open(eval_tsv, "w") as fh:
        fh.write("method\tsamples\tcd_x100\n")
        for row in rows:
            fh.write(f"{row.method}\t{row.samples}\t{row.mean_cd * CD_SCALE!r}\n")
    paths["eval_tsv"] = eval_tsv

    timings_tsv = outdir / "timings.tsv"
    with open(timings_tsv, "w") as fh:
        fh.write("method\ttime_per_sample_s\n")
        for row in rows:
            fh.write(f"{row.method}\t{row.mean_time:.6f}\n")
    paths["timings_tsv"] = timings_tsv

    text = outdir / "eval.txt"
    with open(text, "w") as fh:
        width = max(len(r.method) for r in rows) + 2
        fh.write(f"{'method':<{width}}{'CD (x100)':>12}{'time/sample (s)':>18}{'samples':>10}\n")
        fh.write("-" * (width + 40) + "\n")
        for row in rows:
            fh.write(f"{row.method:<{width}}{row.mean_cd * CD_SCALE:>12.4f}"
                     f"{row.mean_time:>18.6f}{row.samples:>10}\n")
        fh.write(f"\nexcluded samples: {info.get('excluded', 0)} of {info.get('n_queries', '?')}\n")
    paths["text"] = text
    return paths


def render_eval_figures(outdir, rows: list[EvalRow]) -> dict:
    """Bar chart of CD by method plus CD-versus-noise curves."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    paths = {}

    fig, ax = plt.subplots(figsize=(7, 3.2))
    names = [r.method for r in rows]
    values = [r.mean_cd * CD_SCALE for r in rows]
    ax.barh(names[::-1], values[::-1], color="#4878a8")
    ax.set_xlabel(r"mean chamfer distance ($\times 10^2$)")
    ax.set_title("retrieved-vs-original distance by method")
    fig.tight_layout()
    bar_path = outdir / "cd_by_method.png"
    fig.savefig(bar_path, dpi=130)
    plt.close(fig)
    paths["cd_by_method"] = bar_path

    curves: dict[str, list[tuple[float, float]]] = {}
    context_cd = None
    for row in rows:
        if row.method == "context":
            context_cd = row.mean_cd * CD_SCALE
        elif "(sigma=" in row.method:
            family, sig = row.method.split("(sigma=")
            curves.setdefault(family, []).append((float(sig.rstrip(")")), row.mean_cd * CD_SCALE))
    fig, ax = plt.subplots(figsize=(5.2, 3.4))
    for family, pts in sorted(curves.items()):
        pts.sort()
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=family)
    if context_cd is not None:
        ax.axhline(context_cd, color="#444", linestyle="--", label="context")
    ax.set_xlabel("surrogate jitter sigma")
    ax.set_ylabel(r"mean CD ($\times 10^2$)")
    ax.set_title("completion quality vs retrieval error")
    ax.legend()
    fig.tight_layout()
    sigma_path = outdir / "cd_vs_sigma.png"
    fig.savefig(sigma_path, dpi=130)
    plt.close(fig)
    paths["cd_vs_sigma"] = sigma_path
    return paths


def write_loss_curve(outdir, name: str, values, extra_series: dict | None = None) -> dict:
    """Per-epoch loss TSV plus a rendered curve; extra series (e.g. accuracy)
    share the x axis on a twin scale."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    tsv = outdir / f"{name}.tsv"
    with open(tsv, "w") as fh:
        header = ["epoch", "loss"] + sorted(extra_series or {})
        fh.write("\t".join(header) + "\n")
        for i, v in enumerate(values):
            cells = [str(i), repr(float(v))]
            for key in sorted(extra_series or {}):
                cells.append(repr(float(extra_series[key][i])))
            fh.write("\t".join(cells) + "\n")

    fig, ax = plt.subplots(figsize=(5.6, 3.2))
    ax.plot(range(len(values)), values, color="#a85450", label="loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_title(name)
    if extra_series:
        twin = ax.twinx()
        for key in sorted(extra_series):
            twin.plot(range(len(extra_series[key])), extra_series[key],
                      color="#50a878", label=key)
            twin.set_ylabel(key)
    fig.tight_layout()
    png = outdir / f"{name}.png"
    fig.savefig(png, dpi=130)
    plt.close(fig)
    return {"tsv": tsv, "png": png}
