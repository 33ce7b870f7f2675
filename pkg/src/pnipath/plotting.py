"""Report figures: ROC curves and prediction/annotation overlays."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.patches import Patch  # noqa: E402

from . import stitcher as st  # noqa: E402
from .preprocess import LabelMask  # noqa: E402

LEVEL_COLOURS = {"slide": "tab:orange", "subject": "tab:blue"}
PNG_META = {"Software": None}


def roc_figure(curves: dict, report: dict, path) -> None:
    fig, ax = plt.subplots(figsize=(5, 5))
    for level, roc in curves.items():
        ci = report[f"{level}_level"]["auc_ci"]
        ax.plot(roc.fpr, roc.tpr, drawstyle="default", color=LEVEL_COLOURS.get(level),
                label=f"{level} AUC {roc.auc:.3f} ({ci[0]:.3f}-{ci[1]:.3f})")
    ax.plot([0, 1], [0, 1], ls=":", color="0.6", lw=1)
    ax.set_xlim(-0.01, 1.01)
    ax.set_ylim(-0.01, 1.01)
    ax.set_xlabel("1 - specificity")
    ax.set_ylabel("sensitivity")
    ax.set_aspect("equal")
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata=PNG_META)
    plt.close(fig)


def _block_any(mask: np.ndarray, f: int) -> np.ndarray:
    h, w = mask.shape
    ph, pw = -h % f, -w % f
    m = np.pad(mask, ((0, ph), (0, pw)))
    return m.reshape(m.shape[0] // f, f, m.shape[1] // f, f).any(axis=(1, 3))


def overlay_rgb(pred: np.ndarray, labels: np.ndarray) -> np.ndarray:
    background = np.where(labels > 0, 225, 255).astype(np.uint8)
    return st.overlay(pred, labels == 2, background)


def render_overlay(pred: np.ndarray, labels: np.ndarray, path, title: str = "", zoom_pad: int = 64) -> None:
    """Whole-core view (x8, any-pooled) next to a full-resolution crop around the annotations."""
    truth = labels == 2
    f = 8
    small_labels = np.where(_block_any(truth, f), 2, _block_any(labels > 0, f).astype(np.uint8))
    small = overlay_rgb(_block_any(pred, f), small_labels)
    ys, xs = np.nonzero(truth | pred)
    if ys.size:
        y0, y1 = max(ys.min() - zoom_pad, 0), min(ys.max() + zoom_pad + 1, truth.shape[0])
        x0, x1 = max(xs.min() - zoom_pad, 0), min(xs.max() + zoom_pad + 1, truth.shape[1])
    else:
        y0, y1, x0, x1 = 0, truth.shape[0], 0, truth.shape[1]
    crop = overlay_rgb(pred[y0:y1, x0:x1], labels[y0:y1, x0:x1])

    fig, axes = plt.subplots(1, 2, figsize=(9, 4.5))
    axes[0].imshow(small, interpolation="nearest")
    axes[0].set_title("core", fontsize=9)
    axes[1].imshow(crop, interpolation="nearest", extent=(x0, x1, y1, y0))
    axes[1].set_title("annotated region", fontsize=9)
    for ax in axes:
        ax.set_xticks([])
        ax.set_yticks([])
    handles = [Patch(color=np.array(c) / 255, label=lab) for c, lab in (
        (st.INTERSECTION_RGB, "annotated and predicted"),
        (st.PREDICTION_ONLY_RGB, "predicted only"),
        (st.TRUTH_ONLY_RGB, "annotated only"))]
    fig.legend(handles=handles, loc="lower center", ncol=3, fontsize=8, frameon=False)
    if title:
        fig.suptitle(title, fontsize=10)
    fig.tight_layout(rect=(0, 0.06, 1, 1))
    fig.savefig(path, dpi=100, metadata=PNG_META)
    plt.close(fig)


def render_overlays(seg_dir, slide_ids, ious: dict, out_dir) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for sid in slide_ids:
        labels = LabelMask.load(Path(seg_dir) / sid / "labels.png", sid).labels
        pred = st.load_binary(Path(seg_dir) / sid / "pred_mask.png")
        render_overlay(pred, labels, out_dir / f"{sid}.png", title=f"{sid}  IoU {ious[sid]:.2f}")
