"""Report rendering: delimited output plus matplotlib figures.

Every report CSV carries the effective config as leading '#' comment lines
so a result file is self-describing; each CSV gets a PNG rendered next to it.
"""

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

_FIG_SIZE = (7.0, 4.2)


def _config_comment_lines(config_text: str) -> list:
    return [f"# {line}" for line in config_text.strip().splitlines()]


def write_stage_report(out_dir, stage: str, report) -> tuple:
    """Write <stage>.report.csv and <stage>.report.png; returns both paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / f"{stage}.report.csv"
    png_path = out_dir / f"{stage}.report.png"

    lines = _config_comment_lines(report.config_text)
    lines.append("epoch,phase,train_loss,dev_loss,learning_rate,updates,skipped,seconds")
    for e in report.entries:
        lines.append(
            f"{e.epoch},{e.phase},{e.train_loss:.10g},{e.dev_loss:.10g},"
            f"{e.learning_rate:.10g},{e.updates},{e.skipped},{e.seconds:.3f}"
        )
    csv_path.write_text("\n".join(lines) + "\n", encoding="utf-8")

    epochs = [e.epoch for e in report.entries]
    fig, ax = plt.subplots(figsize=_FIG_SIZE)
    ax.plot(epochs, [e.train_loss for e in report.entries], marker="o", label="train loss")
    ax.plot(epochs, [e.dev_loss for e in report.entries], marker="s", label="dev loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss (nats)")
    ax.grid(alpha=0.3)
    ax2 = ax.twinx()
    ax2.plot(epochs, [e.learning_rate for e in report.entries],
             color="tab:red", linestyle="--", label="learning rate")
    ax2.set_ylabel("learning rate")
    ax2.set_yscale("log")
    handles, labels = ax.get_legend_handles_labels()
    h2, l2 = ax2.get_legend_handles_labels()
    ax.legend(handles + h2, labels + l2, loc="best", fontsize=8)
    ax.set_title(f"{stage}: training progress")
    fig.tight_layout()
    fig.savefig(png_path, dpi=120)
    plt.close(fig)
    return csv_path, png_path


def write_pipeline_report(out_dir, reports: dict) -> tuple:
    """Combined dev-loss curves and per-stage summary rows."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "pipeline.report.csv"
    png_path = out_dir / "pipeline.report.png"

    lines = ["stage,epochs,final_train_loss,final_dev_loss,final_learning_rate,wall_seconds"]
    for name, report in reports.items():
        last = report.entries[-1]
        lines.append(
            f"{name},{last.epoch},{last.train_loss:.10g},{last.dev_loss:.10g},"
            f"{last.learning_rate:.10g},{report.wall_seconds:.3f}"
        )
    csv_path.write_text("\n".join(lines) + "\n", encoding="utf-8")

    fig, ax = plt.subplots(figsize=_FIG_SIZE)
    for name, report in reports.items():
        ax.plot([e.epoch for e in report.entries],
                [e.dev_loss for e in report.entries], marker="o", label=name)
    ax.set_xlabel("epoch")
    ax.set_ylabel("dev loss (nats)")
    ax.grid(alpha=0.3)
    ax.legend(loc="best")
    ax.set_title("pipeline: dev criterion per stage")
    fig.tight_layout()
    fig.savefig(png_path, dpi=120)
    plt.close(fig)
    return csv_path, png_path


def write_eval_report(out_dir, name: str, result, config_text: str = "") -> tuple:
    """Per-utterance rates CSV, histogram PNG, and a short text summary."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / f"{name}.csv"
    png_path = out_dir / f"{name}.png"
    txt_path = out_dir / f"{name}.txt"

    lines = _config_comment_lines(config_text) if config_text else []
    lines.append("utt_id,reference,hypothesis,substitutions,deletions,insertions,ref_tokens,rate")
    for u in result.utterances:
        c = u.counts
        rate = f"{c.rate:.6f}" if c.reference_count else "undefined"
        lines.append(
            f"{u.utt_id},{u.reference},{u.hypothesis},"
            f"{c.substitutions},{c.deletions},{c.insertions},{c.reference_count},{rate}"
        )
    csv_path.write_text("\n".join(lines) + "\n", encoding="utf-8")

    totals = result.counts
    label = "WER" if result.unit == "word" else "CER"
    overall = f"{100.0 * totals.rate:.2f}%" if totals.reference_count else "undefined"
    summary = [
        f"{label} {overall}",
        f"substitutions {totals.substitutions}",
        f"deletions {totals.deletions}",
        f"insertions {totals.insertions}",
        f"reference tokens {totals.reference_count}",
        f"utterances {len(result.utterances)}",
    ]
    if config_text:
        summary += ["", "config:"] + config_text.strip().splitlines()
    txt_path.write_text("\n".join(summary) + "\n", encoding="utf-8")

    rates = [u.counts.rate for u in result.utterances if u.counts.reference_count]
    fig, ax = plt.subplots(figsize=_FIG_SIZE)
    if rates:
        ax.hist(rates, bins=min(30, max(5, len(rates) // 5)), color="tab:blue", alpha=0.8)
    ax.set_xlabel(f"per-utterance {label.lower()}")
    ax.set_ylabel("utterances")
    ax.grid(alpha=0.3)
    ax.set_title(f"{label} {overall} over {len(result.utterances)} utterances")
    fig.tight_layout()
    fig.savefig(png_path, dpi=120)
    plt.close(fig)
    return csv_path, png_path, txt_path
