"""Stage orchestration with resumable artifacts.

Stages run in order: ``frames`` (events to intensity images), ``features``,
``matches`` (matching plus geometric verification), ``sfm`` and ``mvs``.
Each stage hashes its input files and its configuration subsection with
64-bit FNV-1a and records the hash with its outputs in
``<out>/stages/<name>.json``; a later run skips the stage when the hash
matches and every recorded output still exists.
"""

import copy
import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from . import events as ev
from . import features as ft
from . import graph as gr
from . import mvs as mv
from . import recon as rc
from . import sfm as sf
from .bundle import BAOptions
from .camera import CameraIntrinsics
from .errors import ConfigError, EvreconError, StageFailure
from .fileio import hash_files, read_image, write_pfm, write_pgm
from .twoview import TwoViewGeometry

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

log = logging.getLogger("evrecon")

STAGES = ("frames", "features", "matches", "sfm", "mvs")

DEFAULTS = {
    "seed": 0,
    "output": "evrecon_out",
    "input": {"events": "", "format": "auto", "time_unit": "s", "width": 346, "height": 260, "strict": True},
    "windows": {"policy": "count", "count": 0, "duration_us": 0},
    "reconstruction": {"method": "integrator", "manifest": "", "contrast": 0.1, "decay": 0.1,
                       "low_percentile": 1.0, "high_percentile": 99.0},
    "features": {"contrast_threshold": 0.02, "edge_ratio": 10.0, "max_features": 4000, "ratio": 0.8,
                 "exhaustive": True, "window": 1},
    "verification": {"h_threshold": 2.0, "f_threshold": 1.5, "min_inliers": 15},
    "camera": {},
    "sfm": {"min_init_angle": 3.0, "min_2d3d": 12, "max_reproj": 4.0, "min_tri_angle": 1.5, "loss_scale": 2.0,
            "refine_intrinsics": None},
    "mvs": {"enabled": True, "radius": 5, "iterations": 3, "cost_threshold": 0.6, "num_neighbors": 4,
            "min_angle": 2.0, "max_angle": 45.0, "refine_steps": 4, "reproj_tol": 1.0, "depth_tol": 0.01,
            "min_support": 2, "binary_ply": True},
}


# ------------------------------------------------------------ config


def _merge(base, override, path=""):
    out = copy.deepcopy(base)
    for k, v in override.items():
        if k not in base:
            raise ConfigError(f"unknown configuration key {path + k!r}")
        if isinstance(base[k], dict) and k != "camera":
            if not isinstance(v, dict):
                raise ConfigError(f"{path + k!r} must be a table")
            out[k] = _merge(base[k], v, path + k + ".")
        else:
            out[k] = v
    return out


@dataclass
class PipelineConfig:
    data: dict
    base_dir: str = "."

    def __getitem__(self, key):
        return self.data[key]

    @property
    def seed(self):
        return int(self.data["seed"])

    @property
    def output(self):
        out = self.data["output"]
        return out if os.path.isabs(out) else os.path.join(self.base_dir, out)

    def path(self, p):
        return p if os.path.isabs(p) else os.path.join(self.base_dir, p)

    @property
    def geometry(self):
        return ev.SensorGeometry(int(self["input"]["width"]), int(self["input"]["height"]))

    @property
    def intrinsics(self):
        cam = self["camera"]
        if not cam:
            return None
        return CameraIntrinsics(float(cam["fx"]), float(cam["fy"]), float(cam["cx"]), float(cam["cy"]),
                                float(cam.get("k1", 0.0)))

    def section_bytes(self, *names):
        sub = {n: self.data[n] for n in names}
        sub["seed"] = self.seed
        return json.dumps(sub, sort_keys=True).encode()


def load_config(path=None, overrides=None, text=None):
    """Parse and validate a TOML configuration; raises :class:`ConfigError`."""
    try:
        if text is None:
            if path is None or not os.path.exists(path):
                raise ConfigError(f"config file not found: {path}")
            with open(path, "rb") as fh:
                raw = tomllib.load(fh)
        else:
            raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML: {exc}") from exc
    data = _merge(DEFAULTS, raw)
    for k, v in (overrides or {}).items():
        if v is not None:
            data[k] = v
    base = os.path.dirname(os.path.abspath(path)) if path else os.getcwd()
    cfg = PipelineConfig(data, base)
    validate(cfg)
    return cfg


def validate(cfg):
    d = cfg.data
    inp = d["input"]
    if inp["format"] not in ("auto", "text", "binary"):
        raise ConfigError(f"input.format must be auto, text or binary, not {inp['format']!r}")
    if inp["time_unit"] not in ("s", "us"):
        raise ConfigError("input.time_unit must be 's' or 'us'")
    if int(inp["width"]) < 1 or int(inp["height"]) < 1:
        raise ConfigError("sensor width and height must be positive")
    method = d["reconstruction"]["method"]
    if method == "integrator":
        if not inp["events"]:
            raise ConfigError("input.events is required for the integrator")
        if not os.path.exists(cfg.path(inp["events"])):
            raise ConfigError(f"event file not found: {cfg.path(inp['events'])}")
    elif method == "external":
        man = d["reconstruction"]["manifest"]
        if not man or not os.path.exists(cfg.path(man)):
            raise ConfigError(f"frame manifest not found: {man!r}")
    else:
        raise ConfigError(f"reconstruction.method must be integrator or external, not {method!r}")
    win = d["windows"]
    if win["policy"] not in ("count", "duration"):
        raise ConfigError("windows.policy must be count or duration")
    if win["policy"] == "count" and int(win["count"]) < 0:
        raise ConfigError("windows.count must be >= 0 (0 selects the default)")
    if win["policy"] == "duration" and int(win["duration_us"]) <= 0:
        raise ConfigError("windows.duration_us must be positive")
    r = d["reconstruction"]
    if not r["contrast"] > 0 or r["decay"] < 0 or not 0 <= r["low_percentile"] < r["high_percentile"] <= 100:
        raise ConfigError("invalid reconstruction parameters")
    if not 0 < d["features"]["ratio"] <= 1:
        raise ConfigError("features.ratio must lie in (0, 1]")
    if d["verification"]["min_inliers"] < 1:
        raise ConfigError("verification.min_inliers must be positive")
    if d["camera"]:
        missing = {"fx", "fy", "cx", "cy"} - set(d["camera"])
        if missing:
            raise ConfigError(f"camera table lacks {sorted(missing)}")
        if d["camera"]["fx"] <= 0 or d["camera"]["fy"] <= 0:
            raise ConfigError("focal lengths must be positive")
    m = d["mvs"]
    if m["radius"] < 1 or m["iterations"] < 0 or m["num_neighbors"] < 1 or m["min_support"] < 2:
        raise ConfigError("invalid mvs parameters")
    if not isinstance(d["seed"], int) or d["seed"] < 0 or d["seed"] >= 2**64:
        raise ConfigError("seed must be an unsigned 64-bit integer")


# ------------------------------------------------------------ artifacts


@dataclass
class StageArtifact:
    stage: str
    input_hash: str
    outputs: list = field(default_factory=list)
    skipped: bool = False


def _hash(paths, extra):
    names = "\n".join(os.path.basename(p) for p in paths).encode()
    return f"{hash_files(paths, extra + names):016x}"


def _record_path(out, stage):
    return os.path.join(out, "stages", f"{stage}.json")


def _load_record(out, stage):
    p = _record_path(out, stage)
    if not os.path.exists(p):
        return None
    with open(p) as fh:
        return json.load(fh)


def _save_record(out, art):
    os.makedirs(os.path.join(out, "stages"), exist_ok=True)
    rel = [os.path.relpath(p, out) for p in art.outputs]
    with open(_record_path(out, art.stage), "w") as fh:
        json.dump({"stage": art.stage, "input_hash": art.input_hash, "outputs": rel}, fh, indent=1)


def _outputs_of(out, stage):
    rec = _load_record(out, stage)
    return [os.path.join(out, p) for p in rec["outputs"]] if rec else []


# ------------------------------------------------------------ stages


def _frames_inputs(cfg):
    if cfg["reconstruction"]["method"] == "external":
        man = cfg.path(cfg["reconstruction"]["manifest"])
        entries = []
        base = os.path.dirname(man)
        with open(man) as fh:
            for line in fh:
                parts = line.split()
                if len(parts) >= 2 and not parts[0].startswith("#"):
                    p = parts[1]
                    entries.append(p if os.path.isabs(p) else os.path.join(base, p))
        return [man] + [p for p in entries if os.path.exists(p)]
    return [cfg.path(cfg["input"]["events"])]


def windows_for(stream, cfg):
    w = cfg["windows"]
    if w["policy"] == "duration":
        return ev.window_by_duration(stream, int(w["duration_us"]))
    n = int(w["count"]) or ev.default_window_size(stream.geometry)
    return ev.window_by_count(stream, n)


def stage_frames(cfg, out):
    fdir = os.path.join(out, "frames")
    os.makedirs(fdir, exist_ok=True)
    r = cfg["reconstruction"]
    if r["method"] == "external":
        images = rc.load_external_frames(cfg.path(r["manifest"]))
    else:
        inp = cfg["input"]
        fmt = None if inp["format"] == "auto" else inp["format"]
        stream = ev.read_events(cfg.path(inp["events"]), cfg.geometry, fmt=fmt, time_unit=inp["time_unit"],
                                strict=bool(inp["strict"]))
        wins = windows_for(stream, cfg)
        icfg = rc.IntegratorConfig(r["contrast"], r["decay"], r["low_percentile"], r["high_percentile"])
        images, _ = rc.reconstruct_stream(wins, stream.geometry, icfg)
    outputs = []
    lines = []
    for img in images:
        name = f"{img.k:06d}"
        pfm = os.path.join(fdir, name + ".pfm")
        write_pfm(pfm, img.values)
        write_pgm(os.path.join(fdir, name + ".pgm"), img.values)
        outputs += [pfm, os.path.join(fdir, name + ".pgm")]
        lines.append(f"{img.t_mid} {name}.pfm\n")
    man = os.path.join(fdir, "manifest.txt")
    with open(man, "w") as fh:
        fh.writelines(lines)
    log.info("frames: %d images", len(images))
    return [man] + outputs


def read_frames(out):
    """(ids, images, timestamps) from the frames stage manifest."""
    return load_frame_manifest(os.path.join(out, "frames", "manifest.txt"))


def load_frame_manifest(path):
    base = os.path.dirname(path)
    ids, imgs, times = [], [], []
    with open(path) as fh:
        for k, line in enumerate(fh):
            t, name = line.split()
            ids.append(k)
            imgs.append(np.asarray(read_image(os.path.join(base, name)), dtype=np.float64))
            times.append(int(t))
    return ids, imgs, times


def stage_features(cfg, out):
    ids, imgs, _ = read_frames(out)
    f = cfg["features"]
    params = ft.SiftParams(contrast_threshold=f["contrast_threshold"], edge_ratio=f["edge_ratio"],
                           max_features=int(f["max_features"]))
    fdir = os.path.join(out, "features")
    os.makedirs(fdir, exist_ok=True)
    outputs = []
    for i, img in zip(ids, imgs):
        fs = ft.detect_features(img, params, image_id=i)
        p = os.path.join(fdir, f"{i:06d}.feat")
        with open(p, "wb") as fh:
            fh.write(ft.encode_features(fs))
        outputs.append(p)
    log.info("features: %d images", len(ids))
    return outputs


def read_features(out):
    fdir = os.path.join(out, "features")
    feats = {}
    for name in sorted(os.listdir(fdir)):
        if name.endswith(".feat"):
            with open(os.path.join(fdir, name), "rb") as fh:
                fs = ft.decode_features(fh.read())
            feats[fs.image_id] = fs
    return feats


def stage_matches(cfg, out):
    feats = read_features(out)
    f, v = cfg["features"], cfg["verification"]
    verified = gr.match_and_verify(feats, intrinsics=cfg.intrinsics, ratio=f["ratio"],
                                   exhaustive=bool(f["exhaustive"]), window=int(f["window"]),
                                   min_inliers=int(v["min_inliers"]), seed=cfg.seed,
                                   h_threshold=v["h_threshold"], f_threshold=v["f_threshold"])
    mdir = os.path.join(out, "matches")
    os.makedirs(mdir, exist_ok=True)
    outputs = []
    summary = []
    for vp in verified:
        p = os.path.join(mdir, f"{vp.a:06d}_{vp.b:06d}.mtch")
        with open(p, "wb") as fh:
            fh.write(ft.encode_matches(ft.MatchSet(vp.a, vp.b, vp.correspondences)))
        outputs.append(p)
        g = vp.geometry
        summary.append({"a": vp.a, "b": vp.b, "kind": g.kind, "matrix": g.matrix.tolist(),
                        "inliers": int(g.num_inliers), "degenerate": bool(g.degenerate),
                        "relation": {k: [None if m is None else m.tolist(), int(n)]
                                     for k, (m, n) in g.relation.items()}})
    gpath = os.path.join(mdir, "geometry.json")
    with open(gpath, "w") as fh:
        json.dump({"nodes": sorted(feats), "pairs": summary}, fh, indent=1)
    log.info("matches: %d verified pairs", len(verified))
    return [gpath] + outputs


def read_scene_graph(out):
    mdir = os.path.join(out, "matches")
    with open(os.path.join(mdir, "geometry.json")) as fh:
        meta = json.load(fh)
    verified = []
    for pr in meta["pairs"]:
        with open(os.path.join(mdir, f"{pr['a']:06d}_{pr['b']:06d}.mtch"), "rb") as fh:
            ms = ft.decode_matches(fh.read())
        rel = {k: (None if m is None else np.array(m), n) for k, (m, n) in pr["relation"].items()}
        geom = TwoViewGeometry(pr["kind"], np.array(pr["matrix"]), np.arange(len(ms.pairs)), rel, pr["degenerate"])
        verified.append(gr.VerifiedPair(pr["a"], pr["b"], geom, ms.pairs))
    return gr.build_scene_graph(meta["nodes"], verified)


def stage_sfm(cfg, out):
    feats = read_features(out)
    graph = read_scene_graph(out)
    s = cfg["sfm"]
    opts = sf.SfMOptions(min_init_angle=s["min_init_angle"], min_2d3d=int(s["min_2d3d"]),
                         max_reproj=s["max_reproj"], min_tri_angle=s["min_tri_angle"],
                         loss_scale=s["loss_scale"], refine_intrinsics=s["refine_intrinsics"], seed=cfg.seed)
    geo = cfg.geometry
    kp = {i: f.xy for i, f in feats.items()}
    rec = sf.run_incremental(graph, kp, cfg.intrinsics, (geo.w, geo.h), opts,
                             names={i: f"{i:06d}.pfm" for i in feats})
    sdir = os.path.join(out, "sparse")
    sf.export_text(rec, sdir)
    ply = os.path.join(sdir, "sparse.ply")
    sf.export_ply(rec, ply, binary=bool(cfg["mvs"]["binary_ply"]))
    for line in rec.log:
        log.info("sfm: %s", line)
    return [os.path.join(sdir, n) for n in ("cameras.txt", "images.txt", "points3D.txt")] + [ply]


def stage_mvs(cfg, out):
    m = cfg["mvs"]
    ddir = os.path.join(out, "dense")
    os.makedirs(ddir, exist_ok=True)
    rec = sf.read_text(os.path.join(out, "sparse"))
    ids, imgs, _ = read_frames(out)
    images = dict(zip(ids, imgs))
    params = mv.StereoParams(radius=int(m["radius"]), iterations=int(m["iterations"]),
                             cost_threshold=m["cost_threshold"], num_neighbors=int(m["num_neighbors"]),
                             min_angle=m["min_angle"], max_angle=m["max_angle"],
                             refine_steps=int(m["refine_steps"]), seed=cfg.seed)
    outputs = []
    maps = {}
    if m["enabled"]:
        maps = mv.compute_depth_maps(rec, images, params)
        for dm in maps.values():
            mv.write_depth_map(ddir, dm)
            outputs += [os.path.join(ddir, f"depth_{dm.ref:06d}.pfm"), os.path.join(ddir, f"normal_{dm.ref:06d}.pfm")]
    cloud = mv.fuse_depth_maps(maps, rec.poses, rec.intrinsics,
                               {i: mv._undistort(images[i], rec.intrinsics) for i in maps},
                               m["reproj_tol"], m["depth_tol"], int(m["min_support"]))
    ply = os.path.join(ddir, "dense.ply")
    mv.write_dense_ply(ply, cloud, binary=bool(m["binary_ply"]))
    log.info("mvs: %d depth maps, %d fused points", len(maps), len(cloud))
    return [ply] + outputs


_RUNNERS = {"frames": stage_frames, "features": stage_features, "matches": stage_matches, "sfm": stage_sfm,
            "mvs": stage_mvs}
_SECTIONS = {"frames": ("input", "windows", "reconstruction"), "features": ("features",),
             "matches": ("features", "verification", "camera"), "sfm": ("sfm", "camera"),
             "mvs": ("mvs",)}
_UPSTREAM = {"frames": (), "features": ("frames",), "matches": ("features",), "sfm": ("features", "matches"),
             "mvs": ("frames", "sfm")}


def stage_hash(cfg, out, stage):
    if stage == "frames":
        paths = _frames_inputs(cfg)
    else:
        paths = [p for up in _UPSTREAM[stage] for p in _outputs_of(out, up)]
    extra = cfg.section_bytes(*_SECTIONS[stage])
    if stage == "sfm":
        # the sparse PLY encoding is the only mvs setting the sfm stage reads
        extra += b"binary_ply=%d" % bool(cfg["mvs"]["binary_ply"])
    return _hash(paths, stage.encode() + extra)


def run_pipeline(cfg, stage_only=None, force=False):
    """Run (or resume) the pipeline; returns the list of :class:`StageArtifact`.

    Raises :class:`StageFailure` naming the failing stage; artifacts of the
    stages that completed are kept.
    """
    out = cfg.output
    os.makedirs(out, exist_ok=True)
    if stage_only is not None and stage_only not in STAGES:
        raise ConfigError(f"unknown stage {stage_only!r}; expected one of {', '.join(STAGES)}")
    arts = []
    for stage in STAGES:
        if stage_only is not None and stage != stage_only:
            continue
        try:
            h = stage_hash(cfg, out, stage)
        except OSError as exc:
            raise StageFailure(stage, exc) from exc
        prev = _load_record(out, stage)
        if not force and prev is not None and prev["input_hash"] == h and \
                all(os.path.exists(os.path.join(out, p)) for p in prev["outputs"]):
            log.info("%s: up to date, skipped", stage)
            arts.append(StageArtifact(stage, h, [os.path.join(out, p) for p in prev["outputs"]], True))
            continue
        try:
            outputs = _RUNNERS[stage](cfg, out)
        except (EvreconError, OSError, ValueError) as exc:
            raise StageFailure(stage, exc) from exc
        art = StageArtifact(stage, h, outputs)
        _save_record(out, art)
        arts.append(art)
    with open(os.path.join(out, "manifest.json"), "w") as fh:
        json.dump([{"stage": a.stage, "input_hash": a.input_hash, "skipped": a.skipped,
                    "outputs": [os.path.relpath(p, out) for p in a.outputs]} for a in arts], fh, indent=1)
    return arts
