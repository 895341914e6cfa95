"""Figures written next to the JSON/CSV outputs: training curves, precision, ablations."""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

LOSS_KEYS = ("recon", "kl", "l_c", "l_reg", "l_e", "total_generator", "total_regressor")


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def training_curves(log, path):
    """One panel of loss terms (log scale) and one of the learning rate, per epoch."""
    fig, (ax, ax_lr) = plt.subplots(2, 1, figsize=(6, 6), sharex=True,
                                    gridspec_kw={"height_ratios": [3, 1]})
    epochs = [e["epoch"] for e in log]
    for key in LOSS_KEYS:
        vals = [e[key] for e in log]
        if any(v > 0 for v in vals):
            ax.plot(epochs, vals, marker=".", label=key)
    ax.set_yscale("log")
    ax.set_ylabel("loss (epoch mean)")
    ax.legend(fontsize=7, ncol=2)
    ax.grid(alpha=0.3)
    ax_lr.step(epochs, [e["lr"] for e in log], where="post", color="k")
    ax_lr.set_yscale("log")
    ax_lr.set_xlabel("epoch")
    ax_lr.set_ylabel("learning rate")
    return _save(fig, path)


def precision_curve(report, path):
    """Precision@K at the requested K values plus the per-query AP distribution."""
    fig, (ax_p, ax_h) = plt.subplots(1, 2, figsize=(9, 3.5))
    ks = sorted(report.precision_at_k)
    ax_p.plot(ks, [report.precision_at_k[k] for k in ks], marker="o", label="Precision@K")
    ax_p.plot(ks, [report.map_at_k[k] for k in ks], marker="s", label="mAP@K")
    ax_p.axhline(report.map_at_all, ls="--", color="gray", label=f"mAP@all = {report.map_at_all:.3f}")
    ax_p.set_xlabel("K")
    ax_p.set_ylim(0, 1)
    ax_p.legend(fontsize=8)
    ax_p.grid(alpha=0.3)
    ax_h.hist(report.per_query_ap, bins=20, range=(0, 1), color="tab:blue", alpha=0.8)
    ax_h.set_xlabel("average precision per query")
    ax_h.set_ylabel("queries")
    return _save(fig, path)


def ablation_bars(result, path, metric="map_at_all"):
    """Per-seed bars for the two compared variants with their medians marked."""
    runs = result["runs"]
    variants = [result["reference"], result["baseline"]]
    seeds = result["seeds"]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    width = 0.8 / len(variants)

    def value(row):
        if metric == "map_at_all":
            return row["map_at_all"]
        return row["precision_at_k"][metric.rsplit("_", 1)[1]]

    for i, v in enumerate(variants):
        xs = [j + i * width for j in range(len(seeds))]
        ax.bar(xs, [value(r) for r in runs[v]], width=width, label=v)
        ax.axhline(result["median"][v][metric], color=f"C{i}", ls="--", lw=1)
    ax.set_xticks([j + width * (len(variants) - 1) / 2 for j in range(len(seeds))])
    ax.set_xticklabels([f"seed {s}" for s in seeds])
    ax.set_ylabel(metric)
    ax.set_ylim(0, 1)
    delta = result["relative_delta"].get(metric)
    if delta is not None:
        ax.set_title(f"{result['preset']}: relative delta of medians {delta:+.1%}")
    ax.legend(fontsize=8)
    return _save(fig, path)
