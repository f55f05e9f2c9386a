"""Pipeline stages behind the CLI subcommands.

Every stage reads its inputs from files under the work directory and
writes its outputs back there, so stages can be re-run or resumed one at a
time. Layout (relative to ``workdir``)::

    slides/slides.json                 registry (synth-data)
    slides/<id>/...                    slide pyramids
    segmentation/<id>.json, _tissue.png
    tiles/raw/index.csv, <id>/*.png    split.json
    stain/target_profile.json          stain/source_profiles.json
    tiles/normalized/...
    models/tile_model.json             models/train_metrics.csv
    heatmaps/<id>.hmap, <id>.png
    features/features.csv
    models/forest.json
    eval/report.json, roc.csv, scores.csv
    summaries/<stage>.json             wall time, parameters, input digest
"""
from __future__ import annotations

import hashlib
import json
import logging
import shutil
import time
from pathlib import Path
from typing import Callable, Iterable, Optional

import numpy as np
from PIL import Image

from . import FORMAT_VERSION
from .classifier import PROFILES, TrainConfig, load_model, predict_batch, save_model, train
from .classifier.training import write_metrics
from .config import ConfigError
from .errors import MissingArtifactError, SentinelError
from .heatmap import Heatmap, build_heatmap, render_heatmap
from .parallel import ordered_map
from .segmentation import SegmentationParams, load_segmentation, save_segmentation, segment_tissue
from .seeding import derive_seed
from .slide_eval import ForestConfig, ForestModel, evaluate as evaluate_scores, slide_features, train_forest
from .slide_eval.features import read_feature_matrix, write_feature_matrix
from .slide_io import SyntheticSlideConfig, generate_synthetic_slide, open_slide
from .stain import StainStats, compute_stain_stats, normalize_or_passthrough
from .tiles import (
    SplitAssignment, TileRecord, TileStore, downsamples_of, label_tiles, read_index,
    split_dataset, tile_contours, write_index, write_tiles,
)

log = logging.getLogger(__name__)


class Workspace:
    def __init__(self, cfg: dict):
        self.cfg = cfg
        self.root = Path(cfg["workdir"])

    def p(self, *parts) -> Path:
        return self.root.joinpath(*parts)

    registry = property(lambda self: self.p("slides", "slides.json"))
    split = property(lambda self: self.p("tiles", "split.json"))
    raw_tiles = property(lambda self: self.p("tiles", "raw"))
    norm_tiles = property(lambda self: self.p("tiles", "normalized"))
    target_profile = property(lambda self: self.p("stain", "target_profile.json"))
    tile_model = property(lambda self: self.p("models", "tile_model.json"))
    forest = property(lambda self: self.p("models", "forest.json"))
    features = property(lambda self: self.p("features", "features.csv"))

    def segmentation(self, sid: str) -> Path:
        return self.p("segmentation", f"{sid}.json")

    def heatmap(self, sid: str) -> Path:
        return self.p("heatmaps", f"{sid}.hmap")

    def model_tiles(self) -> Path:
        return self.norm_tiles if self.cfg["stain"]["enabled"] else self.raw_tiles


def require(path: Path, producer: str) -> Path:
    if not Path(path).exists():
        raise MissingArtifactError(path, producer)
    return Path(path)


def digest_files(paths: Iterable[Path]) -> str:
    h = hashlib.sha256()
    for p in sorted(Path(x) for x in paths):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()


def _write_json(path: Path, doc: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _summary(ws: Workspace, stage: str, started: float, params: dict, inputs: Iterable[Path], **extra) -> dict:
    doc = {
        "format_version": FORMAT_VERSION,
        "stage": stage,
        "parameters": params,
        "inputs_digest": digest_files(inputs),
        "wall_time_s": round(time.perf_counter() - started, 3),
        **extra,
    }
    _write_json(ws.p("summaries", f"{stage}.json"), doc)
    return doc


# --------------------------------------------------------------------------
# registry

def load_registry(ws: Workspace) -> list[dict]:
    """``[{slide_id, manifest, label}]`` from config ``slides`` or the synthetic registry."""
    if ws.cfg.get("slides"):
        out = []
        for m in ws.cfg["slides"]:
            slide = open_slide(m)
            out.append({"slide_id": slide.slide_id, "manifest": str(Path(m).resolve()), "label": slide.label})
        return sorted(out, key=lambda r: r["slide_id"])
    doc = json.loads(require(ws.registry, "synth-data").read_text())
    return [dict(r, manifest=str(ws.root / r["manifest"])) for r in doc["slides"]]


def _labels(registry) -> dict[str, Optional[str]]:
    return {r["slide_id"]: r["label"] for r in registry}


# --------------------------------------------------------------------------
# synth-data

def _synth_one(args):
    cfg, index, label, out_dir = args
    syn = cfg["synthetic"]
    seed = derive_seed(cfg["seed"], "synth", index)
    rng = np.random.default_rng(seed)
    inst = syn["institutions"][(index // 2) % len(syn["institutions"])]
    n_tumor = int(rng.integers(syn["tumor_blobs"][0], syn["tumor_blobs"][1] + 1)) if label == "tumor" else 0
    sc = SyntheticSlideConfig(
        slide_id=f"slide_{index:03d}",
        size=tuple(syn["size"]),
        n_levels=syn["n_levels"],
        tissue_blobs=syn["tissue_blobs"],
        tissue_radius=tuple(syn["tissue_radius"]),
        tumor_blobs=n_tumor,
        tumor_radius=tuple(syn["tumor_radius"]),
        stain_scale=tuple(inst["stain_scale"]),
        stain_shift=tuple(inst["stain_shift"]),
        seed=seed,
    )
    m = generate_synthetic_slide(sc, out_dir)
    return {"slide_id": m.slide_id, "manifest": f"slides/{m.slide_id}/manifest.json", "label": m.label}


def synth_data(cfg: dict) -> dict:
    """Generate the synthetic cohort; labels alternate normal/tumor while both remain."""
    t0 = time.perf_counter()
    ws = Workspace(cfg)
    syn = cfg["synthetic"]
    left = {"normal": int(syn["n_normal"]), "tumor": int(syn["n_tumor"])}
    labels = []
    while left["normal"] or left["tumor"]:
        for lab in ("normal", "tumor"):
            if left[lab]:
                labels.append(lab)
                left[lab] -= 1
    jobs = [(cfg, i, lab, ws.p("slides", f"slide_{i:03d}")) for i, lab in enumerate(labels)]
    rows = ordered_map(_synth_one, jobs, cfg["workers"])
    _write_json(ws.registry, {"format_version": FORMAT_VERSION, "slides": rows})
    return _summary(ws, "synth-data", t0, syn, [], n_slides=len(rows))


# --------------------------------------------------------------------------
# segment / tile

def _segment_one(args):
    cfg, entry = args
    ws = Workspace(cfg)
    slide = open_slide(entry["manifest"])
    res = segment_tissue(slide, SegmentationParams(**cfg["segmentation"]), tiling_level=cfg["tiling"]["level"])
    save_segmentation(res, ws.p("segmentation"))
    return entry["slide_id"], res.reduction_ratio, len(res.contours)


def segment(cfg: dict) -> dict:
    t0 = time.perf_counter()
    ws = Workspace(cfg)
    registry = load_registry(ws)
    out = ordered_map(_segment_one, [(cfg, e) for e in registry], cfg["workers"])
    ratios = {sid: r for sid, r, _ in out}
    return _summary(
        ws, "segment", t0, cfg["segmentation"], [Path(e["manifest"]) for e in registry],
        reduction_ratio={"per_slide": ratios, "mean": float(np.mean(list(ratios.values()))), "min": float(min(ratios.values()))},
    )


def _tile_one(args):
    cfg, entry = args
    ws = Workspace(cfg)
    slide = open_slide(entry["manifest"])
    seg = load_segmentation(require(ws.segmentation(entry["slide_id"]), "segment"))
    tcfg = cfg["tiling"]
    tiles = tile_contours(slide, seg.contours, tcfg["tile_size"], seg.tissue_mask, seg.detection_level, tcfg["min_coverage"])
    if slide.mask is not None:
        tiles = label_tiles(tiles, slide.mask, downsamples_of(slide))
    write_tiles(slide, tiles, ws.raw_tiles)
    return tiles


def tile(cfg: dict) -> dict:
    t0 = time.perf_counter()
    ws = Workspace(cfg)
    registry = load_registry(ws)
    for e in registry:
        require(ws.segmentation(e["slide_id"]), "segment")
    if ws.raw_tiles.exists():
        shutil.rmtree(ws.raw_tiles)
    ws.raw_tiles.mkdir(parents=True)
    per_slide = ordered_map(_tile_one, [(cfg, e) for e in registry], cfg["workers"])
    records = [r for tiles in per_slide for r in tiles]
    write_index(records, ws.raw_tiles / "index.csv")
    split = split_dataset([e["slide_id"] for e in registry], derive_seed(cfg["seed"], "split"), _labels(registry))
    split.save(ws.split)
    counts: dict[str, int] = {}
    for r in records:
        counts[r.label] = counts.get(r.label, 0) + 1
    return _summary(
        ws, "tile", t0, cfg["tiling"], [ws.segmentation(e["slide_id"]) for e in registry],
        tile_counts=counts, split_counts=dict(zip(("train", "validation", "test"), split.counts())),
    )


# --------------------------------------------------------------------------
# stain

def stain_profile(cfg: dict) -> dict:
    t0 = time.perf_counter()
    ws = Workspace(cfg)
    store = TileStore(require(ws.raw_tiles, "tile"))
    split = SplitAssignment.load(ws.split)
    targets = cfg["stain"]["target_slides"] or split.ids("train")[:1]
    records = store.for_slides(targets)
    if not records:
        raise SentinelError(f"target slides {targets} have no tiles")
    stats = compute_stain_stats((store.image(r) for r in records), cfg["stain"]["saturation_floor"])
    ws.target_profile.parent.mkdir(parents=True, exist_ok=True)
    stats.save(ws.target_profile)
    return _summary(ws, "stain-profile", t0, {"target_slides": targets}, [ws.raw_tiles / "index.csv"])


def _normalize_one(args):
    cfg, sid, records = args
    ws = Workspace(cfg)
    store = TileStore(ws.raw_tiles)
    target = StainStats.load(ws.target_profile)
    images = [store.image(r) for r in records]
    try:
        source = compute_stain_stats(images, cfg["stain"]["saturation_floor"])
    except SentinelError:
        source = None
    out = ws.norm_tiles / sid
    out.mkdir(parents=True, exist_ok=True)
    flagged = 0
    for r, img in zip(records, images):
        new, ok = normalize_or_passthrough(img, source, target)
        flagged += not ok
        Image.fromarray(new).save(out / r.filename, format="PNG", compress_level=1)
    return sid, None if source is None else source.to_dict(), flagged


def normalize(cfg: dict) -> dict:
    """Map every slide's tiles from its own stain statistics onto the target profile."""
    t0 = time.perf_counter()
    ws = Workspace(cfg)
    require(ws.target_profile, "stain-profile")
    records = read_index(require(ws.raw_tiles / "index.csv", "tile"))
    by_slide: dict[str, list[TileRecord]] = {}
    for r in records:
        by_slide.setdefault(r.slide_id, []).append(r)
    if ws.norm_tiles.exists():
        shutil.rmtree(ws.norm_tiles)
    ws.norm_tiles.mkdir(parents=True)
    out = ordered_map(_normalize_one, [(cfg, sid, recs) for sid, recs in sorted(by_slide.items())], cfg["workers"])
    write_index(records, ws.norm_tiles / "index.csv")
    _write_json(ws.p("stain", "source_profiles.json"), {
        "format_version": FORMAT_VERSION,
        "profiles": {sid: prof for sid, prof, _ in out},
    })
    return _summary(
        ws, "normalize", t0, cfg["stain"], [ws.target_profile, ws.raw_tiles / "index.csv"],
        passthrough_tiles=int(sum(f for _, _, f in out)),
    )


# --------------------------------------------------------------------------
# tile classifier

def network_config(cfg: dict):
    net = cfg["network"]
    if net["profile"] not in PROFILES:
        raise ConfigError(f"unknown network profile {net['profile']!r}; choose from {sorted(PROFILES)}")
    if net["profile"] == "desk":
        return PROFILES["desk"](int(net.get("crop_size", 32)))
    return PROFILES[net["profile"]]()


def train_tiles(cfg: dict) -> dict:
    t0 = time.perf_counter()
    ws = Workspace(cfg)
    net = network_config(cfg)
    tiles_root = ws.model_tiles()
    store = TileStore(require(tiles_root, "normalize" if cfg["stain"]["enabled"] else "tile"))
    split = SplitAssignment.load(ws.split)
    tc = TrainConfig(seed=derive_seed(cfg["seed"], "train-tiles"), **cfg["training"])
    result = train(store, split, net, tc)
    ws.tile_model.parent.mkdir(parents=True, exist_ok=True)
    save_model(ws.tile_model, result.params, result.mean_image)
    write_metrics(result.curve, ws.p("models", "train_metrics.csv"))
    best = result.curve[result.best_epoch]
    return _summary(
        ws, "train-tiles", t0, {**cfg["network"], **cfg["training"]}, [tiles_root / "index.csv", ws.split],
        best_epoch=result.best_epoch, best_val_acc=best.val_acc, train_acc=best.train_acc,
    )


# --------------------------------------------------------------------------
# heatmap / features / forest / evaluate

def _heatmap_one(args):
    cfg, entry, records = args
    ws = Workspace(cfg)
    params, mean = load_model(ws.tile_model)
    store = TileStore(ws.model_tiles())
    slide = open_slide(entry["manifest"])
    hcfg = cfg["heatmap"]
    if records:
        probs = predict_batch(params, np.stack([store.image(r) for r in records]), mean)
        preds = list(zip(records, (float(p) for p in probs)))
    else:
        preds = []
    hm = build_heatmap(slide, preds, hcfg["ratio"], tiling_level=cfg["tiling"]["level"], tile_size=cfg["tiling"]["tile_size"])
    hm.save(ws.heatmap(entry["slide_id"]))
    Image.fromarray(render_heatmap(hm, hcfg["colormap"])).save(ws.p("heatmaps", f"{entry['slide_id']}.png"), format="PNG")
    return entry["slide_id"], len(preds)


def heatmap(cfg: dict) -> dict:
    t0 = time.perf_counter()
    ws = Workspace(cfg)
    require(ws.tile_model, "train-tiles")
    registry = load_registry(ws)
    records = read_index(require(ws.model_tiles() / "index.csv", "normalize" if cfg["stain"]["enabled"] else "tile"))
    by_slide: dict[str, list[TileRecord]] = {}
    for r in records:
        by_slide.setdefault(r.slide_id, []).append(r)
    ws.p("heatmaps").mkdir(parents=True, exist_ok=True)
    out = ordered_map(_heatmap_one, [(cfg, e, by_slide.get(e["slide_id"], [])) for e in registry], cfg["workers"])
    return _summary(ws, "heatmap", t0, cfg["heatmap"], [ws.tile_model, ws.model_tiles() / "index.csv"],
                    cells=dict(out))


def features(cfg: dict) -> dict:
    t0 = time.perf_counter()
    ws = Workspace(cfg)
    registry = load_registry(ws)
    rows = []
    for e in registry:
        hm = Heatmap.load(require(ws.heatmap(e["slide_id"]), "heatmap"))
        rows.append((e["slide_id"], e["label"], slide_features(hm, cfg["heatmap"]["threshold"]).values))
    ws.features.parent.mkdir(parents=True, exist_ok=True)
    write_feature_matrix(rows, ws.features)
    return _summary(ws, "features", t0, {"threshold": cfg["heatmap"]["threshold"]},
                    [ws.heatmap(e["slide_id"]) for e in registry])


def _xy(ws: Workspace, partition: str):
    ids, labels, X = read_feature_matrix(ws.features)
    split = SplitAssignment.load(ws.split)
    keep = [i for i, sid in enumerate(ids) if split.mapping.get(sid) == partition]
    if any(labels[i] not in ("normal", "tumor") for i in keep):
        raise SentinelError(f"{partition} slides need normal/tumor labels")
    y = np.array([1 if labels[i] == "tumor" else 0 for i in keep], dtype=np.int64)
    return [ids[i] for i in keep], X[keep], y


def train_slide(cfg: dict) -> dict:
    t0 = time.perf_counter()
    ws = Workspace(cfg)
    require(ws.features, "features")
    _, X, y = _xy(ws, "train")
    fc = ForestConfig(seed=derive_seed(cfg["seed"], "forest"), **cfg["forest"])
    model = train_forest(X, y, fc, workers=cfg["workers"] if cfg["workers"] else 1)
    ws.forest.parent.mkdir(parents=True, exist_ok=True)
    model.save(ws.forest)
    return _summary(ws, "train-slide", t0, cfg["forest"], [ws.features, ws.split], n_train=int(len(y)))


def evaluate(cfg: dict, report: Optional[str] = None) -> dict:
    t0 = time.perf_counter()
    ws = Workspace(cfg)
    model = ForestModel.load(require(ws.forest, "train-slide"))
    require(ws.features, "features")
    ids, X, y = _xy(ws, "test")
    scores = model.predict_proba(X)
    rep = evaluate_scores(scores, y, cfg["evaluation"]["decision_threshold"])
    report_path = Path(report) if report else ws.p("eval", "report.json")
    report_path.parent.mkdir(parents=True, exist_ok=True)
    rep.save(report_path, roc_table=report_path.with_name("roc.csv"))
    with open(report_path.with_name("scores.csv"), "w") as fh:
        fh.write("slide_id,label,score\n")
        for sid, lab, s in zip(ids, y, scores):
            fh.write(f"{sid},{'tumor' if lab else 'normal'},{float(s)!r}\n")
    return _summary(ws, "evaluate", t0, cfg["evaluation"], [ws.forest, ws.features],
                    auc=rep.auc, sensitivity=rep.sensitivity, specificity=rep.specificity, report=str(report_path))


STAGES: dict[str, Callable] = {
    "synth-data": synth_data,
    "segment": segment,
    "tile": tile,
    "stain-profile": stain_profile,
    "normalize": normalize,
    "train-tiles": train_tiles,
    "heatmap": heatmap,
    "features": features,
    "train-slide": train_slide,
    "evaluate": evaluate,
}


def run_all(cfg: dict, report: Optional[str] = None) -> dict:
    """Run every stage in order; stain stages are skipped when normalization is disabled."""
    t0 = time.perf_counter()
    summaries = {}
    for name, stage in STAGES.items():
        if name == "synth-data" and cfg.get("slides"):
            continue
        if name in ("stain-profile", "normalize") and not cfg["stain"]["enabled"]:
            continue
        summaries[name] = stage(cfg, report) if name == "evaluate" else stage(cfg)
    ws = Workspace(cfg)
    return _summary(ws, "run-all", t0, {"seed": cfg["seed"]}, [], stages=list(summaries),
                    auc=summaries["evaluate"]["auc"], sensitivity=summaries["evaluate"]["sensitivity"],
                    specificity=summaries["evaluate"]["specificity"],
                    reduction_ratio=summaries["segment"]["reduction_ratio"]["mean"])
