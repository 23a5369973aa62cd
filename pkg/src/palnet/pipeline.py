"""Pipeline configuration and the on-disk stages behind the CLI.

Directory layout under ``output``::

    data/        generate: synthetic meshes, landmarks, reference cloud, ROI box
    align/       preprocess: aligned meshes, aligned ground truth, transforms, folds
    preprocess/  preprocess: per-fold template, atlas fits and patch tensors
    train/       per-fold checkpoints and histories
    predict/     per-subject landmark CSVs (network, raw network, atlas baseline)
    evaluate/    per-fold and aggregated reports for network and atlas
    ablate/      one sub-tree per ablation variant plus the summary table

Every stage directory holds a ``manifest.json`` with the resolved config, the
seeds, library versions, an input fingerprint and output checksums. A stage
whose fingerprint matches its manifest is skipped unless forced.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import platform
import shutil
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .atlas import LandmarkSet, mean_template, project_to_surface, read_landmarks, write_landmarks
from .evaluation import aggregate_folds, evaluate, exclude_landmarks, postprocess
from .geometry import BoundingBox, PointCloud, sample_surface
from .meshio import load_cloud, load_mesh, save_ply
from .network import ArchConfig, load_checkpoint, predict, save_checkpoint
from .patching import PatchTensor, build_patch_tensor
from .registration import Reference, RegistrationConfig, align_subject
from .schema import EAR_LANDMARKS, MeasurementSpec
from .synthetic import FaceGenParams, generate_dataset
from .training import TrainConfig, kfold_split, train

log = logging.getLogger(__name__)

__version__ = "0.1.0"


class ConfigError(ValueError):
    """Invalid configuration; the message names the field."""


class MissingArtifactError(RuntimeError):
    """An upstream stage has not been run."""

    def __init__(self, stage, path):
        super().__init__(f"missing {path}; run `{stage}` first")
        self.stage = stage


@dataclass
class PatchConfig:
    strategy: str = "knn"
    k: int = 1000
    radius: float | None = None
    origin: tuple = (0.0, 0.0, 0.0)
    ordered: bool = True
    # "mesh": patches from the aligned full-resolution vertices;
    # "coarse": from a uniform surface sample of ``coarse_points`` points
    source: str = "mesh"
    coarse_points: int = 10000

    def __post_init__(self):
        self.origin = tuple(float(c) for c in self.origin)
        if self.strategy not in ("knn", "radius"):
            raise ConfigError(f"patch.strategy: expected 'knn' or 'radius', got {self.strategy!r}")
        if self.k < 1:
            raise ConfigError("patch.k: must be >= 1")
        if self.strategy == "radius" and not (self.radius and self.radius > 0):
            raise ConfigError("patch.radius: must be > 0 for the radius strategy")
        if self.source not in ("mesh", "coarse"):
            raise ConfigError(f"patch.source: expected 'mesh' or 'coarse', got {self.source!r}")
        if len(self.origin) != 3:
            raise ConfigError("patch.origin: must have 3 coordinates")


SECTIONS = {
    "synthetic": FaceGenParams,
    "registration": RegistrationConfig,
    "patch": PatchConfig,
    "arch": ArchConfig,
    "train": TrainConfig,
}

ABLATIONS = {
    "baseline": {},
    "no_ordering": {"patch.ordered": False},
    "no_attention": {"arch.attention": False},
    "topk10": {"arch.top_k": 10},
    "reduced_depth": {"arch.filters": [32, 64], "arch.pool_factors": [5, 5]},
    "knn500": {"patch.k": 500},
    "knn1500": {"patch.k": 1500},
    "radius10": {"patch.strategy": "radius", "patch.radius": 10.0},
    "radius15": {"patch.strategy": "radius", "patch.radius": 15.0},
    "radius20": {"patch.strategy": "radius", "patch.radius": 20.0},
    "coarse100": {"patch.source": "coarse", "patch.k": 100},
}


@dataclass
class PipelineConfig:
    output: str = "palnet_run"
    dataset: str | None = None  # defaults to <output>/data
    seed: int = 0
    n_subjects: int = 60
    synthetic: FaceGenParams = field(default_factory=FaceGenParams)
    registration: RegistrationConfig = field(default_factory=RegistrationConfig)
    patch: PatchConfig = field(default_factory=PatchConfig)
    arch: ArchConfig = field(default_factory=ArchConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    postprocess: str = "nearest"
    measurements: str | None = None
    exclude_landmarks: list = field(default_factory=list)
    ablation_variants: list = field(default_factory=lambda: list(ABLATIONS))
    svg: bool = False
    jobs: int = 1

    def __post_init__(self):
        if not isinstance(self.seed, int) or isinstance(self.seed, bool):
            raise ConfigError("seed: must be an integer")
        if self.n_subjects < 1:
            raise ConfigError("n_subjects: must be >= 1")
        if self.jobs < 1:
            raise ConfigError("jobs: must be >= 1")
        pp = self.postprocess
        if not (pp in ("nearest", "none") or (pp.startswith("centroid:") and pp[9:].isdigit())):
            raise ConfigError(f"postprocess: expected nearest, none or centroid:K, got {pp!r}")
        unknown = [v for v in self.ablation_variants if v not in ABLATIONS]
        if unknown:
            raise ConfigError(f"ablation_variants: unknown variant(s) {unknown}; known: {list(ABLATIONS)}")
        if self.train.folds > self.n_subjects:
            raise ConfigError("train.folds: more folds than subjects")
        try:
            self.arch.check_patch_size(self.patch.k)
        except ValueError as exc:
            raise ConfigError(f"patch.k: {exc}") from None

    @property
    def data_dir(self):
        return self.dataset or os.path.join(self.output, "data")

    def stage_dir(self, stage):
        return os.path.join(self.output, stage)

    def to_dict(self):
        d = {}
        for f in fields(self):
            v = getattr(self, f.name)
            d[f.name] = v.to_dict() if hasattr(v, "to_dict") else (asdict(v) if hasattr(v, "__dataclass_fields__") else v)
        d["patch"]["origin"] = list(d["patch"]["origin"])
        return d

    @classmethod
    def from_dict(cls, d):
        if not isinstance(d, dict):
            raise ConfigError("config: top level must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"{sorted(unknown)[0]}: unknown config field")
        kw = {}
        for key, value in d.items():
            if key in SECTIONS:
                if not isinstance(value, dict):
                    raise ConfigError(f"{key}: must be an object")
                kw[key] = _build_section(key, value)
            else:
                kw[key] = value
        try:
            return cls(**kw)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"config: {exc}") from None

    def with_overrides(self, overrides):
        d = self.to_dict()
        for key, value in overrides.items():
            _set_dotted(d, key, value)
        return PipelineConfig.from_dict(d)

    def resolved(self):
        """Copy with every stage seed derived from the master seed."""
        d = self.to_dict()
        for sec in ("synthetic", "registration", "train"):
            d[sec]["seed"] = self.seed
        return PipelineConfig.from_dict(d)

    def measurement_spec(self):
        if not self.measurements:
            return MeasurementSpec()
        with open(self.measurements, encoding="utf-8") as fh:
            return MeasurementSpec.from_dict(json.load(fh))


def _check_types(name, cls, value):
    """Reject values whose type does not match the field default (None defaults accept anything)."""
    defaults = {f.name: getattr(cls(), f.name) for f in fields(cls)}
    for key, v in value.items():
        if key not in defaults:
            raise ConfigError(f"{name}.{key}: unknown field")
        d = defaults[key]
        if d is None or v is None and key in ("radius", "top_k"):
            continue
        if isinstance(d, bool):
            ok = isinstance(v, bool)
        elif isinstance(d, int):
            ok = isinstance(v, int) and not isinstance(v, bool)
        elif isinstance(d, float):
            ok = isinstance(v, (int, float)) and not isinstance(v, bool)
        elif isinstance(d, str):
            ok = isinstance(v, str)
        elif isinstance(d, (tuple, list)):
            ok = isinstance(v, (tuple, list))
        else:
            ok = True
        if not ok:
            raise ConfigError(f"{name}.{key}: expected {type(d).__name__}, got {v!r}")


def _build_section(name, value):
    cls = SECTIONS[name]
    value = dict(value)
    _check_types(name, cls, value)
    try:
        if name == "patch":
            unknown = set(value) - {f.name for f in fields(PatchConfig)}
            if unknown:
                raise ConfigError(f"patch.{sorted(unknown)[0]}: unknown field")
            return PatchConfig(**value)
        if name == "arch":
            for key in ("filters", "pool_factors", "mlp_widths"):
                if key in value:
                    value[key] = tuple(value[key])
        return cls.from_dict(value)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name}: {exc}") from None


def parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_overrides(items):
    out = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"--set {item!r}: expected KEY=VALUE")
        out[key.strip()] = parse_value(value)
    return out


def _set_dotted(d, key, value):
    parts = key.split(".")
    node = d
    for p in parts[:-1]:
        if p not in node or not isinstance(node[p], dict):
            raise ConfigError(f"{key}: unknown config field")
        node = node[p]
    if parts[-1] not in node:
        raise ConfigError(f"{key}: unknown config field")
    node[parts[-1]] = value


def load_config(path=None, overrides=None) -> PipelineConfig:
    d = {}
    if path:
        try:
            with open(path, encoding="utf-8") as fh:
                d = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"config: cannot read {path}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config: {path} is not valid JSON ({exc})") from None
    cfg = PipelineConfig.from_dict(d)
    if overrides:
        cfg = cfg.with_overrides(overrides)
    return cfg


# -- manifests ------------------------------------------------------------------

def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _fingerprint(obj):
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode("utf-8")).hexdigest()


def _versions():
    import scipy
    import sklearn
    return {"palnet": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "scikit-learn": sklearn.__version__}


def read_manifest(directory):
    path = os.path.join(directory, "manifest.json")
    if not os.path.isfile(path):
        return None
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _require(directory, stage):
    m = read_manifest(directory)
    if m is None or m.get("status") != "complete":
        raise MissingArtifactError(stage, os.path.join(directory, "manifest.json"))
    return m


def _up_to_date(directory, fingerprint, force):
    if force:
        return False
    m = read_manifest(directory)
    return m is not None and m.get("status") == "complete" and m.get("fingerprint") == fingerprint


def _outputs(directory):
    out = {}
    for root, _, files in os.walk(directory):
        for f in sorted(files):
            if f == "manifest.json":
                continue
            p = os.path.join(root, f)
            out[os.path.relpath(p, directory).replace(os.sep, "/")] = sha256_file(p)
    return dict(sorted(out.items()))


def _write_manifest(directory, stage, cfg, fingerprint, inputs, extra=None):
    manifest = {"stage": stage, "status": "complete", "fingerprint": fingerprint,
                "config": cfg.to_dict(), "seed": cfg.seed, "versions": _versions(),
                "inputs": inputs, "outputs": _outputs(directory)}
    manifest.update(extra or {})
    with open(os.path.join(directory, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    return manifest


def _fresh_dir(directory):
    if os.path.isdir(directory):
        shutil.rmtree(directory)
    os.makedirs(directory)


def fold_seed(master, fold):
    return int(np.random.SeedSequence([master, fold]).generate_state(1)[0])


# -- generate -------------------------------------------------------------------

def run_generate(cfg: PipelineConfig, force=False):
    cfg = cfg.resolved()
    out = cfg.data_dir
    fp = _fingerprint({"synthetic": cfg.synthetic.to_dict(), "n": cfg.n_subjects})
    if _up_to_date(out, fp, force):
        log.info("generate: %s is up to date", out)
        return read_manifest(out)
    _fresh_dir(out)
    ds = generate_dataset(cfg.synthetic, cfg.n_subjects, out)
    return _write_manifest(out, "generate", cfg, fp, {}, {"subjects": [s["id"] for s in ds["subjects"]]})


def _load_dataset(cfg):
    path = os.path.join(cfg.data_dir, "dataset.json")
    if not os.path.isfile(path):
        raise MissingArtifactError("generate", path)
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


# -- preprocess: alignment ------------------------------------------------------

_WORKER_REF = None


def _init_worker(reference):
    global _WORKER_REF
    _WORKER_REF = reference


def _align_one(job):
    mesh_path, lm_path = job
    mesh = load_mesh(mesh_path)
    aligned, t, info = align_subject(mesh, _WORKER_REF, return_info=True)
    gt = read_landmarks(lm_path)
    return aligned, gt.with_coords(t.apply(gt.coords)), t, info["ransac"]["inlier_fraction"]


def _map(fn, jobs, n_jobs, initializer=None, initargs=()):
    if n_jobs <= 1 or len(jobs) <= 1:
        if initializer:
            initializer(*initargs)
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=n_jobs, initializer=initializer, initargs=initargs) as ex:
        return list(ex.map(fn, jobs))


def run_align(cfg: PipelineConfig, force=False):
    cfg = cfg.resolved()
    ds = _load_dataset(cfg)
    out = cfg.stage_dir("align")
    data_sum = sha256_file(os.path.join(cfg.data_dir, "dataset.json"))
    fp = _fingerprint({"registration": cfg.registration.to_dict(), "dataset": data_sum,
                       "folds": cfg.train.folds, "seed": cfg.seed})
    if _up_to_date(out, fp, force):
        log.info("align: %s is up to date", out)
        return read_manifest(out)
    _fresh_dir(out)
    for sub in ("meshes", "landmarks"):
        os.makedirs(os.path.join(out, sub))
    root = cfg.data_dir
    ref_cloud = load_cloud(os.path.join(root, ds.get("reference", "reference.ply")))
    with open(os.path.join(root, ds.get("roi", "roi.json")), encoding="utf-8") as fh:
        roi = BoundingBox.from_dict(json.load(fh))
    reference = Reference(ref_cloud, roi, cfg.registration)
    ids = [s["id"] for s in ds["subjects"]]
    jobs = [(os.path.join(root, s["mesh"]), os.path.join(root, s["landmarks"])) for s in ds["subjects"]]
    results = _map(_align_one, jobs, cfg.jobs, _init_worker, (reference,))
    transforms = {}
    for sid, (aligned, gt, t, frac) in zip(ids, results):
        save_ply(os.path.join(out, "meshes", f"{sid}.ply"), aligned)
        write_landmarks(os.path.join(out, "landmarks", f"{sid}.csv"), gt)
        transforms[sid] = {"T_final": t.tolist(), "inlier_fraction": frac}
        log.info("aligned %s (inlier fraction %.3f)", sid, frac)
    with open(os.path.join(out, "transforms.json"), "w", encoding="utf-8") as fh:
        json.dump(transforms, fh, indent=1)
    folds = [{"train": tr, "val": va} for tr, va in kfold_split(ids, cfg.train.folds, cfg.seed)]
    with open(os.path.join(out, "folds.json"), "w", encoding="utf-8") as fh:
        json.dump(folds, fh, indent=1)
    return _write_manifest(out, "preprocess", cfg, fp, {"dataset.json": data_sum}, {"subjects": ids})


# -- preprocess: atlas + patches -------------------------------------------------

def _load_aligned(align_dir):
    m = _require(align_dir, "preprocess")
    ids = m["subjects"]
    gts = [read_landmarks(os.path.join(align_dir, "landmarks", f"{sid}.csv")) for sid in ids]
    with open(os.path.join(align_dir, "folds.json"), encoding="utf-8") as fh:
        folds = json.load(fh)
    return m, ids, gts, folds


def _surface_path(pre_dir, align_dir, cfg, sid):
    if cfg.patch.source == "coarse":
        return os.path.join(pre_dir, "surfaces", f"{sid}.ply")
    return os.path.join(align_dir, "meshes", f"{sid}.ply")


def _write_fits(path, ids, sets):
    rows = ["subject,name,x,y,z"]
    for sid, s in zip(ids, sets):
        for n, c in zip(s.names, s.coords):
            rows.append(",".join([sid, n] + [repr(float(v)) for v in c]))
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("\n".join(rows) + "\n")


def _read_fits(path):
    out = {}
    with open(path, encoding="utf-8") as fh:
        next(fh)
        for line in fh:
            sid, name, x, y, z = line.rstrip("\n").split(",")
            out.setdefault(sid, ([], []))
            out[sid][0].append(name)
            out[sid][1].append([float(x), float(y), float(z)])
    return {sid: LandmarkSet(n, c) for sid, (n, c) in out.items()}


def run_patches(cfg: PipelineConfig, align_dir, out, force=False):
    cfg = cfg.resolved()
    am, ids, gts, folds = _load_aligned(align_dir)
    fp = _fingerprint({"patch": asdict(cfg.patch), "align": am["fingerprint"], "seed": cfg.seed})
    if _up_to_date(out, fp, force):
        log.info("preprocess: %s is up to date", out)
        return read_manifest(out)
    _fresh_dir(out)
    if cfg.patch.source == "coarse":
        os.makedirs(os.path.join(out, "surfaces"))
    clouds = []
    for i, sid in enumerate(ids):
        mesh = load_mesh(os.path.join(align_dir, "meshes", f"{sid}.ply"))
        if cfg.patch.source == "coarse":
            cloud = sample_surface(mesh, cfg.patch.coarse_points, seed=[cfg.seed, i])
            save_ply(os.path.join(out, "surfaces", f"{sid}.ply"), cloud)
        else:
            cloud = mesh.to_cloud()
        clouds.append(cloud)
    names = gts[0].names
    pos = {sid: i for i, sid in enumerate(ids)}
    for f, fold in enumerate(folds):
        fdir = os.path.join(out, f"fold_{f}")
        os.makedirs(fdir)
        template = mean_template([gts[pos[s]] for s in fold["train"]])
        write_landmarks(os.path.join(fdir, "template.csv"), template)
        fits = [project_to_surface(template, c) for c in clouds]
        _write_fits(os.path.join(fdir, "atlas_fits.csv"), ids, fits)
        pt = build_patch_tensor(list(zip(clouds, fits)), cfg.patch.strategy, cfg.patch.k,
                                cfg.patch.radius, cfg.patch.origin, cfg.seed, cfg.patch.ordered, names)
        pt.save(os.path.join(fdir, "patches.bin"))
        log.info("fold %d: patch tensor %s", f, pt.shape)
    return _write_manifest(out, "preprocess", cfg, fp, {"align": am["fingerprint"]},
                           {"subjects": ids, "folds": len(folds), "align_dir": align_dir})


def run_preprocess(cfg: PipelineConfig, force=False):
    run_align(cfg, force)
    return run_patches(cfg, cfg.stage_dir("align"), cfg.stage_dir("preprocess"), force)


# -- train ----------------------------------------------------------------------

def _train_fold(job):
    fdir, out_dir, arch_d, train_d, idx_tr, idx_va, gt_arr = job
    pt = PatchTensor.load(os.path.join(fdir, "patches.bin"))
    arch = ArchConfig.from_dict(arch_d)
    tcfg = TrainConfig.from_dict(train_d)
    params, hist = train(pt.data, gt_arr, idx_tr, idx_va, arch, tcfg)
    os.makedirs(out_dir, exist_ok=True)
    save_checkpoint(os.path.join(out_dir, "model.ckpt"), params)
    hist.write_csv(os.path.join(out_dir, "history.csv"))
    hist.write_json(os.path.join(out_dir, "history.json"))
    return {"best_epoch": hist.best_epoch, "best_val_loss": float(min(hist.val_loss)),
            "epochs": len(hist.epochs)}


def run_train(cfg: PipelineConfig, pre_dir=None, out=None, force=False):
    cfg = cfg.resolved()
    pre_dir = pre_dir or cfg.stage_dir("preprocess")
    out = out or cfg.stage_dir("train")
    pm = _require(pre_dir, "preprocess")
    fp = _fingerprint({"arch": cfg.arch.to_dict(), "train": cfg.train.to_dict(),
                       "preprocess": pm["fingerprint"]})
    if _up_to_date(out, fp, force):
        log.info("train: %s is up to date", out)
        return read_manifest(out)
    _, ids, gts, folds = _load_aligned(pm["align_dir"])
    pos = {sid: i for i, sid in enumerate(ids)}
    gt_arr = np.stack([g.coords for g in gts])
    _fresh_dir(out)
    jobs = []
    for f, fold in enumerate(folds):
        tdict = dict(cfg.train.to_dict(), seed=fold_seed(cfg.seed, f))
        jobs.append((os.path.join(pre_dir, f"fold_{f}"), os.path.join(out, f"fold_{f}"),
                     cfg.arch.to_dict(), tdict, [pos[s] for s in fold["train"]],
                     [pos[s] for s in fold["val"]], gt_arr))
    results = _map(_train_fold, jobs, cfg.jobs)
    for f, r in enumerate(results):
        log.info("fold %d: best epoch %s, val loss %.4f", f, r["best_epoch"], r["best_val_loss"])
    best = int(np.argmin([r["best_val_loss"] for r in results]))
    extra = {"folds": results, "checkpoints": [f"fold_{f}/model.ckpt" for f in range(len(folds))],
             "best": f"fold_{best}/model.ckpt", "preprocess_dir": pre_dir}
    return _write_manifest(out, "train", cfg, fp, {"preprocess": pm["fingerprint"]}, extra)


# -- predict --------------------------------------------------------------------

def run_predict(cfg: PipelineConfig, train_dir=None, out=None, force=False):
    cfg = cfg.resolved()
    train_dir = train_dir or cfg.stage_dir("train")
    out = out or cfg.stage_dir("predict")
    tm = _require(train_dir, "train")
    pre_dir = tm["preprocess_dir"]
    pm = _require(pre_dir, "preprocess")
    fp = _fingerprint({"postprocess": cfg.postprocess, "train": tm["fingerprint"]})
    if _up_to_date(out, fp, force):
        log.info("predict: %s is up to date", out)
        return read_manifest(out)
    align_dir = pm["align_dir"]
    _, ids, gts, folds = _load_aligned(align_dir)
    pos = {sid: i for i, sid in enumerate(ids)}
    names = gts[0].names
    _fresh_dir(out)
    for sub in ("network", "raw", "atlas"):
        os.makedirs(os.path.join(out, sub))
    assignment = {}
    for f, fold in enumerate(folds):
        fdir = os.path.join(pre_dir, f"fold_{f}")
        params = load_checkpoint(os.path.join(train_dir, f"fold_{f}", "model.ckpt"))
        pt = PatchTensor.load(os.path.join(fdir, "patches.bin"))
        fits = _read_fits(os.path.join(fdir, "atlas_fits.csv"))
        val = [pos[s] for s in fold["val"]]
        raw = predict(pt.data[val], params).astype(np.float64)
        for sid, r in zip(fold["val"], raw):
            surface = load_cloud(_surface_path(pre_dir, align_dir, cfg, sid))
            pred = LandmarkSet(names, r)
            write_landmarks(os.path.join(out, "raw", f"{sid}.csv"), pred)
            write_landmarks(os.path.join(out, "network", f"{sid}.csv"),
                            postprocess(pred, surface, cfg.postprocess))
            write_landmarks(os.path.join(out, "atlas", f"{sid}.csv"), fits[sid])
            assignment[sid] = f
    with open(os.path.join(out, "folds.json"), "w", encoding="utf-8") as fh:
        json.dump({"assignment": assignment, "folds": len(folds)}, fh, indent=1, sort_keys=True)
    return _write_manifest(out, "predict", cfg, fp, {"train": tm["fingerprint"]},
                           {"train_dir": train_dir, "align_dir": align_dir})


# -- evaluate -------------------------------------------------------------------

def _eval_method(pred_dir, method, ids, gts, folds, names, spec, exclude, out_dir, svg):
    pos = {sid: i for i, sid in enumerate(ids)}
    reports = []
    for f, fold in enumerate(folds):
        pred = np.stack([read_landmarks(os.path.join(pred_dir, method, f"{s}.csv")).coords
                         for s in fold["val"]])
        gt = np.stack([gts[pos[s]].coords for s in fold["val"]])
        nm = names
        if exclude:
            pred, gt, nm = exclude_landmarks(pred, gt, names, exclude)
        rep = evaluate(pred, gt, nm, spec, meta={"fold": f}, on_degenerate="skip")
        rep.write(os.path.join(out_dir, f"fold_{f}"), svg=svg)
        reports.append(rep)
    agg = aggregate_folds(reports)
    agg.write(os.path.join(out_dir, "aggregate"), svg=svg)
    return agg


def run_evaluate(cfg: PipelineConfig, pred_dir=None, out=None, force=False, val_losses=None):
    cfg = cfg.resolved()
    pred_dir = pred_dir or cfg.stage_dir("predict")
    out = out or cfg.stage_dir("evaluate")
    pm = _require(pred_dir, "predict")
    spec = cfg.measurement_spec()
    fp = _fingerprint({"predict": pm["fingerprint"], "spec": spec.to_dict(),
                       "exclude": list(cfg.exclude_landmarks), "svg": cfg.svg})
    if _up_to_date(out, fp, force):
        log.info("evaluate: %s is up to date", out)
        return read_manifest(out)
    _, ids, gts, folds = _load_aligned(pm["align_dir"])
    names = gts[0].names
    unknown = [n for n in cfg.exclude_landmarks if n not in names]
    if unknown:
        raise ConfigError(f"exclude_landmarks: unknown landmark(s) {unknown}")
    spec.validate(names)
    _fresh_dir(out)
    summary = {}
    variants = [("all", [])]
    if cfg.exclude_landmarks:
        variants.append(("excluded", list(cfg.exclude_landmarks)))
    for label, drop in variants:
        for method in ("network", "atlas"):
            agg = _eval_method(pred_dir, method, ids, gts, folds, names, spec, drop,
                               os.path.join(out, label, method), cfg.svg)
            summary.setdefault(label, {})[method] = {
                "pointwise_mean": agg.overall_mean, "pointwise_std": agg.overall_std,
                "distance_matrix_mean": agg.distance_matrix_mean, "n_landmarks": agg.n_landmarks}
        s = summary[label]
        s["improvement_pct"] = 100.0 * (1.0 - s["network"]["pointwise_mean"] / s["atlas"]["pointwise_mean"])
    with open(os.path.join(out, "summary.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)
    return _write_manifest(out, "evaluate", cfg, fp, {"predict": pm["fingerprint"]}, {"summary": summary})


# -- ablate ---------------------------------------------------------------------

def run_ablate(cfg: PipelineConfig, variants=None, force=False):
    """Run the variant grid; the baseline is the main pipeline tree itself."""
    cfg = cfg.resolved()
    variants = list(variants or cfg.ablation_variants)
    unknown = [v for v in variants if v not in ABLATIONS]
    if unknown:
        raise ConfigError(f"ablation_variants: unknown variant(s) {unknown}")
    _require(cfg.stage_dir("align"), "preprocess")
    rows = []
    root = cfg.stage_dir("ablate")
    os.makedirs(root, exist_ok=True)
    for name in variants:
        overrides = ABLATIONS[name]
        vcfg = cfg.with_overrides(overrides) if overrides else cfg
        if name == "baseline":
            dirs = {s: cfg.stage_dir(s) for s in ("preprocess", "train", "predict", "evaluate")}
        else:
            dirs = {s: os.path.join(root, name, s) for s in ("preprocess", "train", "predict", "evaluate")}
        log.info("ablation variant %s %s", name, overrides)
        run_patches(vcfg, cfg.stage_dir("align"), dirs["preprocess"], force)
        tm = run_train(vcfg, dirs["preprocess"], dirs["train"], force)
        run_predict(vcfg, dirs["train"], dirs["predict"], force)
        em = run_evaluate(vcfg, dirs["predict"], dirs["evaluate"], force)
        s = em["summary"]["all"]
        rows.append({"variant": name, "overrides": overrides,
                     "val_loss": float(np.mean([f["best_val_loss"] for f in tm["folds"]])),
                     "pointwise_mean": s["network"]["pointwise_mean"],
                     "distance_matrix_mean": s["network"]["distance_matrix_mean"],
                     "atlas_pointwise_mean": s["atlas"]["pointwise_mean"]})
    with open(os.path.join(root, "ablation.json"), "w", encoding="utf-8") as fh:
        json.dump(rows, fh, indent=1)
    with open(os.path.join(root, "ablation.csv"), "w", encoding="utf-8") as fh:
        fh.write("variant,val_loss,pointwise_mean,distance_matrix_mean,atlas_pointwise_mean\n")
        for r in rows:
            fh.write(",".join([r["variant"]] + [repr(float(r[k])) for k in
                     ("val_loss", "pointwise_mean", "distance_matrix_mean", "atlas_pointwise_mean")]) + "\n")
    return rows


def default_exclusions():
    return list(EAR_LANDMARKS)


def run_all(cfg: PipelineConfig, force=False):
    run_generate(cfg, force)
    run_preprocess(cfg, force)
    run_train(cfg, force=force)
    run_predict(cfg, force=force)
    return run_evaluate(cfg, force=force)
