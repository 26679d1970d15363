"""Figures and tables summarising a pipeline output directory."""

import csv
import json
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from . import sfm as sf  # noqa: E402
from .fileio import read_pfm, read_ply, read_trajectory  # noqa: E402
from .pipeline import read_frames  # noqa: E402


def _frames_figure(imgs, path, max_tiles=8):
    n = min(len(imgs), max_tiles)
    fig, axes = plt.subplots(1, n, figsize=(2.2 * n, 2.0), squeeze=False)
    for k, ax in enumerate(axes[0]):
        ax.imshow(imgs[k], cmap="gray", vmin=0, vmax=1)
        ax.set_title(f"frame {k}", fontsize=8)
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _sparse_figure(rec, path, gt=None):
    _, X = rec.point_array()
    centers = np.array([rec.poses[i].center for i in rec.registered]).reshape(-1, 3)
    fig, ax = plt.subplots(figsize=(5, 5))
    if len(X):
        ax.scatter(X[:, 0], X[:, 2], s=1, c="0.4", label=f"{len(X)} points")
    ax.plot(centers[:, 0], centers[:, 2], "o-", c="tab:red", ms=4, label="cameras")
    for i, c in zip(rec.registered, centers):
        ax.annotate(str(i), c[[0, 2]], fontsize=7)
    if gt is not None:
        ax.plot(gt[:, 0], gt[:, 2], "x--", c="tab:blue", ms=5, label="ground truth (aligned)")
    ax.set_xlabel("x")
    ax.set_ylabel("z")
    ax.set_aspect("equal", adjustable="datalim")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _error_histogram(errs, path):
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.hist(errs, bins=40, color="tab:gray")
    ax.set_xlabel("reprojection error [px]")
    ax.set_ylabel("observations")
    ax.set_title(f"mean {errs.mean():.3f} px" if len(errs) else "no observations", fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _depth_figure(paths, path):
    n = len(paths)
    fig, axes = plt.subplots(1, n, figsize=(2.6 * n, 2.2), squeeze=False)
    for ax, p in zip(axes[0], paths):
        d = np.asarray(read_pfm(p), dtype=np.float64)
        d = np.where(d > 0, d, np.nan)
        lo, hi = np.nanpercentile(d, [2, 98]) if np.any(np.isfinite(d)) else (0.0, 1.0)
        im = ax.imshow(d, cmap="viridis", vmin=lo, vmax=hi)
        ax.set_title(os.path.basename(p)[:-4], fontsize=8)
        ax.axis("off")
        fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_report(out, gt_path=None, report_dir=None):
    """Write PNG figures, ``images.csv`` and ``stages.tsv``; returns the paths."""
    rdir = report_dir or os.path.join(out, "report")
    os.makedirs(rdir, exist_ok=True)
    written = []

    if os.path.exists(os.path.join(out, "frames", "manifest.txt")):
        _, imgs, _ = read_frames(out)
        if imgs:
            p = os.path.join(rdir, "frames.png")
            _frames_figure(imgs, p)
            written.append(p)

    rec = None
    sparse = os.path.join(out, "sparse")
    if os.path.exists(os.path.join(sparse, "images.txt")):
        rec = sf.read_text(sparse)

    errs_by_img = {}
    pose_err = {}
    gt_aligned = None
    if rec is not None:
        imgs, _, _, _ = rec.observations()
        errs = rec.reprojection_errors()
        for i in rec.registered:
            errs_by_img[i] = errs[imgs == i]
        if gt_path is not None:
            _, gt = read_trajectory(gt_path)
            gt_poses = dict(enumerate(gt))
            if len([i for i in rec.registered if i in gt_poses]) >= 3:
                pose_err, (s, R, t) = sf.pose_errors(rec, gt_poses)
                # show ground truth in the reconstruction frame
                gt_aligned = np.array([(R.T @ (gt_poses[i].center - t)) / s for i in rec.registered
                                       if i in gt_poses])
        p = os.path.join(rdir, "sparse_topview.png")
        _sparse_figure(rec, p, gt_aligned)
        written.append(p)
        p = os.path.join(rdir, "reprojection_errors.png")
        _error_histogram(errs, p)
        written.append(p)

        p = os.path.join(rdir, "images.csv")
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["image", "name", "observations", "mean_reproj_px", "rot_err_deg", "center_err"])
            for i in rec.registered:
                e = errs_by_img[i]
                rot, cen = pose_err.get(i, (np.nan, np.nan))
                w.writerow([i, rec.names.get(i, ""), len(e), f"{e.mean():.4f}" if len(e) else "",
                            f"{rot:.4f}", f"{cen:.6f}"])
        written.append(p)

    dense = os.path.join(out, "dense")
    if os.path.isdir(dense):
        depth = sorted(os.path.join(dense, f) for f in os.listdir(dense) if f.startswith("depth_"))
        if depth:
            p = os.path.join(rdir, "depth_maps.png")
            _depth_figure(depth[:6], p)
            written.append(p)

    man = os.path.join(out, "manifest.json")
    if os.path.exists(man):
        with open(man) as fh:
            stages = json.load(fh)
        p = os.path.join(rdir, "stages.tsv")
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh, delimiter="\t")
            w.writerow(["stage", "input_hash", "skipped", "outputs"])
            dense_ply = os.path.join(out, "dense", "dense.ply")
            for st in stages:
                w.writerow([st["stage"], st["input_hash"], st["skipped"], len(st["outputs"])])
        written.append(p)
        if os.path.exists(dense_ply):
            pts = read_ply(dense_ply)
            p = os.path.join(rdir, "summary.tsv")
            with open(p, "w", newline="") as fh:
                w = csv.writer(fh, delimiter="\t")
                w.writerow(["quantity", "value"])
                w.writerow(["registered_images", len(rec.registered) if rec else 0])
                w.writerow(["sparse_points", len(rec.points) if rec else 0])
                w.writerow(["dense_points", len(pts)])
            written.append(p)
    return written
