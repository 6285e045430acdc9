"""Experiment orchestration: stages, config, and content-hashed manifests.

Layout under ``out_dir``::

    data/          synthetic identities (PNG + float tensors), dataset.json
    models/        base.ckpt, prior.hft
    attacks/       <arm>/idNNN/{adv_k.png, adv.hft, delta.hft, mask_k.png, attack.json}
                   purified copies sit beside them as adv_k__<purifier>.png
    purified/      <arm>/<purifier>/idNNN/images.hft
    personalized/  <arm>/<purifier>/idNNN.ckpt
    generated/     <arm>/<purifier>/idNNN/{samples.hft, sample_k.png}, pretrained/
    reports/       results.json, report.csv, report.txt, figures/, grids/
    manifests/     <stage>.json

Every stage records, per work item, a hash of its inputs (relevant config
plus the hashes of the upstream files it read) and the hashes of the files
it wrote.  Re-running a stage skips items whose input hash is unchanged and
whose outputs are intact.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import diffusion as dm
from . import plotting
from .attack import AttackConfig, aspl, masks_for
from .diffusion import ModelConfig, TrainConfig
from .image import decode_png, generate_dataset, mask_png_bytes, png_bytes
from .metrics import ConditionResult, build_report, hf_energy, nearest_mse, psnr, retention_ratio
from .purify import PurifierSpec, apply_purifier
from .tensor import tensor_from_bytes, tensor_to_bytes

log = logging.getLogger(__name__)

STAGES = ("gen_data", "train_base", "attack", "purify", "personalize", "generate", "evaluate", "report")
ARMS = ("none", "uniform", "hf")


class ConfigError(Exception):
    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("invalid config:\n  " + "\n  ".join(self.errors))


class StageInputError(Exception):
    """Upstream artifact missing or corrupt."""


# ---- config --------------------------------------------------------------

@dataclass(frozen=True)
class DatasetConfig:
    n_identities: int = 5
    size: int = 32
    seed: int = 7
    n_base_identities: int = 12
    base_seed: int = 1000

    def __post_init__(self):
        if self.n_identities < 1 or self.n_base_identities < 1:
            raise ValueError("dataset needs at least one identity in each corpus")
        if self.size < 8:
            raise ValueError(f"image size must be >= 8, got {self.size}")


@dataclass(frozen=True)
class ScheduleConfig:
    steps: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def build(self) -> dm.DiffusionSchedule:
        return dm.make_schedule(self.steps, self.beta_start, self.beta_end)

    def __post_init__(self):
        self.build()


def _default_attacks() -> dict[str, AttackConfig]:
    return {
        "uniform": AttackConfig(eta=0.02, eta_mask=0.02, mask_mode="full"),
        "hf": AttackConfig(eta=0.01, eta_mask=0.5, ratio=0.03, mask_mode="edge"),
    }


def _default_purifiers() -> list[PurifierSpec]:
    return [PurifierSpec("identity"), PurifierSpec("bilateral"), PurifierSpec("diffpure", t_star=10)]


@dataclass(frozen=True)
class PipelineConfig:
    out_dir: str = "runs/default"
    seed: int = 0
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    base_train: TrainConfig = field(default_factory=lambda: TrainConfig(lr=1e-3, steps=1500, batch_size=8))
    personalize: TrainConfig = field(default_factory=lambda: TrainConfig(lr=1e-3, steps=300, batch_size=4))
    n_prior_images: int = 16
    n_samples: int = 20
    arms: tuple[str, ...] = ARMS
    attacks: dict[str, AttackConfig] = field(default_factory=_default_attacks)
    purifiers: tuple[PurifierSpec, ...] = field(default_factory=lambda: tuple(_default_purifiers()))
    handoff: str = "png"

    def to_dict(self) -> dict:
        return {
            "out_dir": self.out_dir,
            "seed": self.seed,
            "dataset": dataclasses.asdict(self.dataset),
            "schedule": dataclasses.asdict(self.schedule),
            "model": self.model.to_dict(),
            "base_train": dataclasses.asdict(self.base_train),
            "personalize": dataclasses.asdict(self.personalize),
            "n_prior_images": self.n_prior_images,
            "n_samples": self.n_samples,
            "arms": list(self.arms),
            "attacks": {k: v.to_dict() for k, v in self.attacks.items()},
            "purifiers": [p.to_dict() for p in self.purifiers],
            "handoff": self.handoff,
        }

    def purifier(self, label: str) -> PurifierSpec:
        for p in self.purifiers:
            if p.label == label:
                return p
        raise KeyError(label)


def _build(cls, raw, where: str, errors: list[str]):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        errors.append(f"{where}: expected an object, got {type(raw).__name__}")
        return None
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        errors.append(f"{where}: unknown keys {unknown}")
        raw = {k: v for k, v in raw.items() if k in names}
    try:
        if cls is ModelConfig and "vocab" in raw:
            raw = {**raw, "vocab": tuple(raw["vocab"])}
        if cls is AttackConfig and isinstance(raw.get("surrogate"), dict):
            sub = _build(TrainConfig, raw["surrogate"], f"{where}.surrogate", errors)
            raw = {**raw, "surrogate": sub if sub is not None else TrainConfig()}
        return cls(**raw)
    except (TypeError, ValueError, KeyError) as exc:
        errors.append(f"{where}: {exc}")
        return None


def config_from_dict(raw: dict) -> PipelineConfig:
    """Validate and build a config, collecting every error before raising."""
    errors: list[str] = []
    if not isinstance(raw, dict):
        raise ConfigError(["config root must be a JSON object"])
    defaults = PipelineConfig()
    known = {f.name for f in dataclasses.fields(PipelineConfig)}
    unknown = sorted(set(raw) - known)
    if unknown:
        errors.append(f"unknown top-level keys {unknown}")

    kw: dict = {}
    for key, cls in (("dataset", DatasetConfig), ("schedule", ScheduleConfig), ("model", ModelConfig),
                     ("base_train", TrainConfig), ("personalize", TrainConfig)):
        if key in raw:
            kw[key] = _build(cls, raw[key], key, errors)

    for key in ("seed", "n_prior_images", "n_samples"):
        if key in raw:
            v = raw[key]
            if not isinstance(v, int) or isinstance(v, bool) or v < (0 if key == "seed" else 1):
                errors.append(f"{key}: expected a {'non-negative' if key == 'seed' else 'positive'} integer, got {v!r}")
            else:
                kw[key] = v
    if "out_dir" in raw:
        if not isinstance(raw["out_dir"], str) or not raw["out_dir"]:
            errors.append("out_dir: expected a non-empty string")
        else:
            kw["out_dir"] = raw["out_dir"]
    if "handoff" in raw:
        if raw["handoff"] not in ("png", "float"):
            errors.append(f"handoff: expected 'png' or 'float', got {raw['handoff']!r}")
        else:
            kw["handoff"] = raw["handoff"]

    arms = raw.get("arms", list(defaults.arms))
    if not isinstance(arms, list) or not arms:
        errors.append("arms: expected a nonempty list")
        arms = []
    bad = [a for a in arms if a not in ARMS]
    if bad:
        errors.append(f"arms: unknown arms {bad}; expected a subset of {list(ARMS)}")
    if len(set(arms)) != len(arms):
        errors.append("arms: duplicates are not allowed")
    kw["arms"] = tuple(a for a in arms if a in ARMS)

    attacks = dict(defaults.attacks)
    raw_attacks = raw.get("attacks", {})
    if not isinstance(raw_attacks, dict):
        errors.append("attacks: expected an object keyed by arm")
        raw_attacks = {}
    for arm, spec in raw_attacks.items():
        if arm not in ("uniform", "hf"):
            errors.append(f"attacks: no attack settings for arm {arm!r}")
            continue
        built = _build(AttackConfig, spec, f"attacks.{arm}", errors)
        if built is not None:
            attacks[arm] = built
    kw["attacks"] = attacks

    if "purifiers" in raw:
        if not isinstance(raw["purifiers"], list) or not raw["purifiers"]:
            errors.append("purifiers: expected a nonempty list")
        else:
            specs = [_build(PurifierSpec, p, f"purifiers[{i}]", errors) for i, p in enumerate(raw["purifiers"])]
            specs = [s for s in specs if s is not None]
            labels = [s.label for s in specs]
            if len(set(labels)) != len(labels):
                errors.append(f"purifiers: labels must be unique, got {labels}")
            kw["purifiers"] = tuple(specs)
    if any(v is None for v in kw.values()):
        kw = {k: v for k, v in kw.items() if v is not None}
    if errors:
        raise ConfigError(errors)
    return PipelineConfig(**kw)


def load_config(path) -> PipelineConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError([f"config file {path} does not exist"]) from None
    except json.JSONDecodeError as exc:
        raise ConfigError([f"config file {path} is not valid JSON: {exc}"]) from None
    return config_from_dict(raw)


# ---- hashing, seeds, atomic files ----------------------------------------

def sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def hash_json(obj) -> str:
    return sha256(json.dumps(obj, sort_keys=True, default=str).encode())


def derive_seed(global_seed: int, *labels) -> int:
    """Stable 32-bit seed from the global seed and a label path."""
    digest = hashlib.sha256(json.dumps([global_seed, *map(str, labels)]).encode()).digest()
    return int.from_bytes(digest[:4], "little")


def write_atomic(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.chmod(tmp, 0o644)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class Workspace:
    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg
        self.root = Path(cfg.out_dir)
        self.sched = cfg.schedule.build()
        self._cache: dict[str, bytes] = {}

    def manifest_path(self, stage: str) -> Path:
        return self.root / "manifests" / f"{stage}.json"

    def load_manifest(self, stage: str) -> dict | None:
        p = self.manifest_path(stage)
        if not p.exists():
            return None
        try:
            return json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise StageInputError(f"manifest {p} is corrupt: {exc}") from None

    def save_manifest(self, stage: str, manifest: dict) -> None:
        write_atomic(self.manifest_path(stage), json.dumps(manifest, indent=1, sort_keys=True).encode())

    def require(self, stage: str, key: str) -> dict:
        """Upstream work item entry; raises StageInputError naming what is missing."""
        m = self.load_manifest(stage)
        if m is None:
            raise StageInputError(f"missing upstream stage '{stage}' (no {self.manifest_path(stage)}); run it first")
        entry = m["items"].get(key)
        if entry is None:
            raise StageInputError(f"stage '{stage}' has no entry '{key}'; re-run '{stage}' for it")
        return entry

    def read(self, rel: str, expected_hash: str | None = None) -> bytes:
        p = self.root / rel
        try:
            data = p.read_bytes()
        except FileNotFoundError:
            raise StageInputError(f"artifact {p} listed in a manifest is missing") from None
        if expected_hash is not None and sha256(data) != expected_hash:
            raise StageInputError(f"artifact {p} does not match its manifest hash (corrupt or edited)")
        return data

    def read_entry(self, stage: str, key: str, rel: str) -> bytes:
        entry = self.require(stage, key)
        if rel not in entry["outputs"]:
            raise StageInputError(f"stage '{stage}' entry '{key}' has no output {rel}")
        return self.read(rel, entry["outputs"][rel])

    def entry_hash(self, stage: str, key: str) -> str:
        return hash_json(self.require(stage, key)["outputs"])

    def outputs_intact(self, outputs: dict[str, str]) -> bool:
        for rel, h in outputs.items():
            p = self.root / rel
            if not p.exists() or sha256(p.read_bytes()) != h:
                return False
        return True


def run_items(ws: Workspace, stage: str, items: list[tuple[str, dict, Callable[[], dict[str, bytes]]]]) -> int:
    """Run (key, inputs, produce) work items; returns how many were (re)built."""
    manifest = ws.load_manifest(stage) or {"stage": stage, "items": {}}
    built = 0
    for key, inputs, produce in items:
        ih = hash_json(inputs)
        prev = manifest["items"].get(key)
        if prev and prev["input_hash"] == ih and ws.outputs_intact(prev["outputs"]):
            log.info("%s: %s up to date", stage, key)
            continue
        log.info("%s: building %s", stage, key)
        files = produce()
        outputs = {}
        for rel, data in files.items():
            write_atomic(ws.root / rel, data)
            outputs[rel] = sha256(data)
        manifest["items"][key] = {"input_hash": ih, "outputs": outputs}
        ws.save_manifest(stage, manifest)
        built += 1
    if built == 0 and not ws.manifest_path(stage).exists():
        ws.save_manifest(stage, manifest)
    return built


# ---- helpers -------------------------------------------------------------

def _ident(i: int) -> str:
    return f"id{i:03d}"


def _arr_bytes(a) -> bytes:
    return tensor_to_bytes(np.asarray(a, dtype=np.float64))


def _arr(data: bytes) -> np.ndarray:
    a, _ = tensor_from_bytes(data)
    return a


def _json_bytes(obj) -> bytes:
    return json.dumps(obj, indent=1, sort_keys=True).encode()


def _select(all_: tuple[str, ...], only: str | None, what: str) -> tuple[str, ...]:
    if only is None:
        return all_
    if only not in all_:
        raise StageInputError(f"{what} {only!r} is not in the config ({list(all_)})")
    return (only,)


def _load_originals(ws: Workspace, i: int) -> tuple[np.ndarray, np.ndarray, dict]:
    """(originals, references, input hashes) per the configured hand-off mode."""
    key = _ident(i)
    entry = ws.require("gen_data", key)
    if ws.cfg.handoff == "float":
        rel = f"data/{key}/images.hft"
        imgs = _arr(ws.read(rel, entry["outputs"].get(rel)))
        return imgs[:4], imgs[4:], {rel: entry["outputs"][rel]}
    rels = [f"data/{key}/orig_{k}.png" for k in range(4)] + [f"data/{key}/ref_{k}.png" for k in range(4)]
    imgs = np.stack([decode_png(ws.read(r, entry["outputs"].get(r)), r) for r in rels])
    return imgs[:4], imgs[4:], {r: entry["outputs"][r] for r in rels}


def _load_base(ws: Workspace) -> tuple[dm.SurrogateModel, np.ndarray, dict]:
    entry = ws.require("train_base", "base")
    ck = ws.read("models/base.ckpt", entry["outputs"]["models/base.ckpt"])
    model, _ = dm.checkpoint_from_bytes(ck, "models/base.ckpt")
    prior_entry = ws.require("train_base", "prior")
    prior = _arr(ws.read("models/prior.hft", prior_entry["outputs"]["models/prior.hft"]))
    return model, prior, {"base": entry["outputs"], "prior": prior_entry["outputs"]}


# ---- stages --------------------------------------------------------------

def cmd_gen_data(ws: Workspace, **_) -> int:
    cfg = ws.cfg.dataset

    def identity_item(i, ident):
        def produce():
            key = _ident(i)
            files = {f"data/{key}/images.hft": _arr_bytes(ident.images)}
            for k in range(4):
                files[f"data/{key}/orig_{k}.png"] = png_bytes(ident.originals[k])
                files[f"data/{key}/ref_{k}.png"] = png_bytes(ident.references[k])
            files[f"data/{key}/spec.json"] = _json_bytes(dataclasses.asdict(ident.spec))
            return files
        return produce

    identities = generate_dataset(cfg.n_identities, cfg.seed, cfg.size)
    items = [(_ident(i), {"dataset": dataclasses.asdict(cfg), "i": i}, identity_item(i, ident))
             for i, ident in enumerate(identities)]

    def produce_base():
        corpus = generate_dataset(cfg.n_base_identities, cfg.base_seed, cfg.size)
        return {"data/base/images.hft": _arr_bytes(np.concatenate([c.images for c in corpus]))}

    items.append(("base_corpus", {"dataset": dataclasses.asdict(cfg)}, produce_base))

    def produce_manifest():
        entries = []
        for i, ident in enumerate(identities):
            key = _ident(i)
            entries.append({
                "index": i,
                "seed": ident.spec.seed,
                "originals": [f"data/{key}/orig_{k}.png" for k in range(4)],
                "references": [f"data/{key}/ref_{k}.png" for k in range(4)],
            })
        return {"data/dataset.json": _json_bytes({"dataset": dataclasses.asdict(cfg), "identities": entries})}

    items.append(("manifest", {"dataset": dataclasses.asdict(cfg)}, produce_manifest))
    return run_items(ws, "gen_data", items)


def cmd_train_base(ws: Workspace, **_) -> int:
    cfg = ws.cfg
    corpus_entry = ws.require("gen_data", "base_corpus")
    train_cfg = dataclasses.replace(cfg.base_train, seed=derive_seed(cfg.seed, "train_base"))
    prior_seed = derive_seed(cfg.seed, "prior")

    def produce_base():
        corpus = _arr(ws.read("data/base/images.hft", corpus_entry["outputs"]["data/base/images.hft"]))
        model, history = dm.train_base(corpus, train_cfg, ws.sched, cfg.model)
        return {
            "models/base.ckpt": dm.checkpoint_bytes(model, ws.sched, {"train": dataclasses.asdict(train_cfg)}),
            "models/base_history.json": _json_bytes({"loss": history}),
        }

    base_inputs = {"corpus": corpus_entry["outputs"], "train": dataclasses.asdict(train_cfg),
                   "model": cfg.model.to_dict(), "schedule": dataclasses.asdict(cfg.schedule)}
    n = run_items(ws, "train_base", [("base", base_inputs, produce_base)])

    base_entry = ws.require("train_base", "base")

    def produce_prior():
        model, _ = dm.checkpoint_from_bytes(ws.read("models/base.ckpt", base_entry["outputs"]["models/base.ckpt"]))
        prior = dm.sample(model, ws.sched, dm.CLASS_TOKEN, prior_seed, cfg.n_prior_images, cfg.dataset.size)
        return {"models/prior.hft": _arr_bytes(prior)}

    prior_inputs = {"base": base_entry["outputs"], "n": cfg.n_prior_images, "seed": prior_seed}
    return n + run_items(ws, "train_base", [("prior", prior_inputs, produce_prior)])


def cmd_attack(ws: Workspace, arm: str | None = None, **_) -> int:
    cfg = ws.cfg
    arms = _select(cfg.arms, arm, "arm")
    base, prior, base_hashes = _load_base(ws)
    items = []
    for a in arms:
        for i in range(cfg.dataset.n_identities):
            key = f"{a}/{_ident(i)}"
            x, refs, in_hashes = _load_originals(ws, i)
            acfg = None
            if a != "none":
                # arm-independent seed: arms differ only in budgets and masks
                acfg = dataclasses.replace(cfg.attacks[a], seed=derive_seed(cfg.seed, "attack", i))
            inputs = {"images": in_hashes, "base": base_hashes, "attack": acfg.to_dict() if acfg else None,
                      "handoff": cfg.handoff}
            items.append((key, inputs, _attack_producer(ws, a, i, x, refs, acfg, base, prior)))
    return run_items(ws, "attack", items)


def _attack_producer(ws, arm, i, x, refs, acfg, base, prior):
    def produce():
        d = f"attacks/{arm}/{_ident(i)}"
        if acfg is None:
            delta = np.zeros_like(x)
            masks = np.zeros(x.shape[:3], dtype=np.uint8)
            meta = {"arm": arm, "config": None, "trace": []}
        else:
            ps = aspl(x, refs, acfg, base, ws.sched, prior, masks=masks_for(x, acfg))
            delta, masks = ps.deltas, ps.masks
            meta = {"arm": arm, "config": acfg.to_dict(), "trace": ps.trace}
        adv = x + delta
        files = {f"{d}/adv.hft": _arr_bytes(adv), f"{d}/delta.hft": _arr_bytes(delta),
                 f"{d}/attack.json": _json_bytes(meta)}
        for k in range(len(x)):
            files[f"{d}/adv_{k}.png"] = png_bytes(adv[k])
            if acfg is not None:
                files[f"{d}/mask_{k}.png"] = mask_png_bytes(masks[k])
        return files
    return produce


def _load_adv(ws: Workspace, arm: str, i: int) -> tuple[np.ndarray, dict]:
    key = f"{arm}/{_ident(i)}"
    entry = ws.require("attack", key)
    d = f"attacks/{arm}/{_ident(i)}"
    if ws.cfg.handoff == "float":
        rel = f"{d}/adv.hft"
        return _arr(ws.read(rel, entry["outputs"][rel])), {rel: entry["outputs"][rel]}
    rels = [f"{d}/adv_{k}.png" for k in range(4)]
    imgs = np.stack([decode_png(ws.read(r, entry["outputs"][r]), r) for r in rels])
    return imgs, {r: entry["outputs"][r] for r in rels}


def _purify_seed(cfg: PipelineConfig, spec: PurifierSpec, i: int) -> int:
    # independent of the arm: clean and attacked images share the purifier noise
    return derive_seed(cfg.seed, "purify", spec.label, spec.seed, i)


def _purify_all(ws, spec: PurifierSpec, imgs: np.ndarray, i: int, base) -> np.ndarray:
    seed = _purify_seed(ws.cfg, spec, i)
    return np.stack([apply_purifier(dataclasses.replace(spec, seed=seed), img, base, ws.sched, seed_offset=k)
                     for k, img in enumerate(imgs)])


def cmd_purify(ws: Workspace, arm: str | None = None, purifier: str | None = None, **_) -> int:
    cfg = ws.cfg
    arms = _select(cfg.arms, arm, "arm")
    labels = _select(tuple(p.label for p in cfg.purifiers), purifier, "purifier")
    base, _, base_hashes = _load_base(ws)
    items = []
    for a in arms:
        for label in labels:
            spec = cfg.purifier(label)
            for i in range(cfg.dataset.n_identities):
                adv, adv_hashes = _load_adv(ws, a, i)
                inputs = {"adv": adv_hashes, "purifier": spec.to_dict(), "seed": _purify_seed(cfg, spec, i),
                          "base": base_hashes if spec.kind == "diffpure" else None}

                def produce(a=a, label=label, spec=spec, i=i, adv=adv):
                    out = _purify_all(ws, spec, adv, i, base)
                    files = {f"purified/{a}/{label}/{_ident(i)}/images.hft": _arr_bytes(out)}
                    for k in range(len(out)):
                        files[f"attacks/{a}/{_ident(i)}/adv_{k}__{label}.png"] = png_bytes(out[k])
                    return files

                items.append((f"{a}/{label}/{_ident(i)}", inputs, produce))
    return run_items(ws, "purify", items)


def _load_purified(ws: Workspace, arm: str, label: str, i: int) -> tuple[np.ndarray, dict]:
    entry = ws.require("purify", f"{arm}/{label}/{_ident(i)}")
    if ws.cfg.handoff == "float":
        rel = f"purified/{arm}/{label}/{_ident(i)}/images.hft"
        return _arr(ws.read(rel, entry["outputs"][rel])), {rel: entry["outputs"][rel]}
    rels = [f"attacks/{arm}/{_ident(i)}/adv_{k}__{label}.png" for k in range(4)]
    return np.stack([decode_png(ws.read(r, entry["outputs"][r]), r) for r in rels]), {r: entry["outputs"][r] for r in rels}


def _conditions(cfg: PipelineConfig, arm, purifier):
    arms = _select(cfg.arms, arm, "arm")
    labels = _select(tuple(p.label for p in cfg.purifiers), purifier, "purifier")
    return [(a, label, i) for a in arms for label in labels for i in range(cfg.dataset.n_identities)]


def cmd_personalize(ws: Workspace, arm: str | None = None, purifier: str | None = None, **_) -> int:
    cfg = ws.cfg
    base, prior, base_hashes = _load_base(ws)
    items = []
    for a, label, i in _conditions(cfg, arm, purifier):
        imgs, hashes = _load_purified(ws, a, label, i)
        # shared across conditions so comparisons between arms are paired
        tcfg = dataclasses.replace(cfg.personalize, seed=derive_seed(cfg.seed, "personalize", i))
        inputs = {"images": hashes, "base": base_hashes, "train": dataclasses.asdict(tcfg)}

        def produce(a=a, label=label, i=i, imgs=imgs, tcfg=tcfg):
            model, history = dm.personalize(base, imgs, prior, tcfg, ws.sched)
            return {
                f"personalized/{a}/{label}/{_ident(i)}.ckpt": dm.checkpoint_bytes(model, ws.sched),
                f"personalized/{a}/{label}/{_ident(i)}.json": _json_bytes({"loss": history}),
            }

        items.append((f"{a}/{label}/{_ident(i)}", inputs, produce))
    return run_items(ws, "personalize", items)


def _sample_seed(cfg: PipelineConfig, i: int) -> int:
    # shared across conditions: paired comparisons see the same sampler noise
    return derive_seed(cfg.seed, "generate", i)


def cmd_generate(ws: Workspace, arm: str | None = None, purifier: str | None = None, **_) -> int:
    cfg = ws.cfg
    base, _, base_hashes = _load_base(ws)
    size = cfg.dataset.size
    items = []

    def sample_files(d, samples):
        files = {f"{d}/samples.hft": _arr_bytes(samples)}
        for k, s in enumerate(samples):
            files[f"{d}/sample_{k:02d}.png"] = png_bytes(s)
        return files

    seed0 = derive_seed(cfg.seed, "generate", "pretrained")
    items.append(("pretrained", {"base": base_hashes, "n": cfg.n_samples, "seed": seed0},
                  lambda: sample_files("generated/pretrained",
                                       dm.sample(base, ws.sched, dm.CLASS_TOKEN, seed0, cfg.n_samples, size))))
    for a, label, i in _conditions(cfg, arm, purifier):
        key = f"{a}/{label}/{_ident(i)}"
        rel = f"personalized/{key}.ckpt"
        entry = ws.require("personalize", key)
        seed = _sample_seed(cfg, i)
        inputs = {"model": entry["outputs"][rel], "n": cfg.n_samples, "seed": seed}

        def produce(key=key, rel=rel, entry=entry, seed=seed):
            model, _ = dm.checkpoint_from_bytes(ws.read(rel, entry["outputs"][rel]), rel)
            return sample_files(f"generated/{key}",
                                dm.sample(model, ws.sched, dm.INSTANCE_TOKEN, seed, cfg.n_samples, size))

        items.append((key, inputs, produce))
    return run_items(ws, "generate", items)


def _read_samples(ws: Workspace, key: str) -> tuple[np.ndarray, str]:
    entry = ws.require("generate", key)
    rel = f"generated/{key}/samples.hft"
    return _arr(ws.read(rel, entry["outputs"][rel])), entry["outputs"][rel]


def _evaluate_inputs(ws: Workspace) -> dict:
    """Upstream manifest entries evaluation depends on; raises if any is missing."""
    cfg = ws.cfg
    deps = {"train_base/base": ws.require("train_base", "base"),
            "generate/pretrained": ws.require("generate", "pretrained")}
    for i in range(cfg.dataset.n_identities):
        deps[f"gen_data/{_ident(i)}"] = ws.require("gen_data", _ident(i))
        for a in cfg.arms:
            deps[f"attack/{a}/{_ident(i)}"] = ws.require("attack", f"{a}/{_ident(i)}")
            for spec in cfg.purifiers:
                key = f"{a}/{spec.label}/{_ident(i)}"
                deps[f"purify/{key}"] = ws.require("purify", key)
                deps[f"generate/{key}"] = ws.require("generate", key)
    return {k: v["outputs"] for k, v in deps.items()}


def evaluate_results(ws: Workspace) -> list[ConditionResult]:
    """Per-identity measurements for every condition."""
    cfg = ws.cfg
    base, _, _ = _load_base(ws)
    results: list[ConditionResult] = []
    pre_samples, _ = _read_samples(ws, "pretrained")
    pre_hf = float(np.mean([hf_energy(s) for s in pre_samples]))
    for i in range(cfg.dataset.n_identities):
        x, _, _ = _load_originals(ws, i)
        results.append(ConditionResult("pretrained", "-", gen_mse=nearest_mse(pre_samples, x), gen_hf=pre_hf))
        for a in cfg.arms:
            adv, _ = _load_adv(ws, a, i)
            delta = adv - x
            for spec in cfg.purifiers:
                key = f"{a}/{spec.label}/{_ident(i)}"
                samples, _ = _read_samples(ws, key)
                purified, _ = _load_purified(ws, a, spec.label, i)
                seed = _purify_seed(cfg, spec, i)
                spec_i = dataclasses.replace(spec, seed=seed)
                ret = math.nan
                if np.any(delta != 0):
                    ret = float(np.mean([
                        retention_ratio(x[k], delta[k],
                                        lambda im, k=k: apply_purifier(spec_i, im, base, ws.sched, seed_offset=k))
                        for k in range(len(x))
                    ]))
                results.append(ConditionResult(
                    method=a,
                    purifier=spec.label,
                    l1=float(np.mean(np.abs(delta))),
                    linf=float(np.max(np.abs(delta))),
                    retention=ret,
                    psnr=float(np.mean([psnr(purified[k], x[k]) for k in range(len(x))])),
                    gen_mse=nearest_mse(samples, x),
                    gen_hf=float(np.mean([hf_energy(s) for s in samples])),
                ))
    return results


def cmd_evaluate(ws: Workspace, **_) -> int:
    inputs = _evaluate_inputs(ws)

    def produce():
        results = evaluate_results(ws)
        return {"reports/results.json": _json_bytes([dataclasses.asdict(r) for r in results])}

    return run_items(ws, "evaluate", [("results", {"inputs": inputs, "handoff": ws.cfg.handoff}, produce)])


def load_results(ws: Workspace) -> list[ConditionResult]:
    data = json.loads(ws.read_entry("evaluate", "results", "reports/results.json"))
    return [ConditionResult(**{k: (math.nan if v is None else v) for k, v in r.items()}) for r in data]


def cmd_report(ws: Workspace, **_) -> int:
    cfg = ws.cfg
    entry = ws.require("evaluate", "results")
    results = load_results(ws)

    def produce():
        report = build_report(results)
        files = {
            "reports/report.csv": report.to_csv().encode(),
            "reports/report.txt": report.to_table().encode(),
            "reports/figures/retention.png": plotting.retention_figure(report),
            "reports/figures/generation.png": plotting.generation_figure(report),
        }
        traces = {}
        for a in cfg.arms:
            if a == "none":
                continue
            traces[a] = [json.loads(ws.read_entry("attack", f"{a}/{_ident(i)}",
                                                  f"attacks/{a}/{_ident(i)}/attack.json"))["trace"]
                         for i in range(cfg.dataset.n_identities)]
        if traces:
            files["reports/figures/attack_trace.png"] = plotting.attack_trace_figure(traces)
        for i in range(cfg.dataset.n_identities):
            files.update(_identity_grids(ws, i))
        return files

    return run_items(ws, "report", [("report", {"results": entry["outputs"], "arms": list(cfg.arms)}, produce)])


def _identity_grids(ws: Workspace, i: int) -> dict[str, bytes]:
    cfg = ws.cfg
    x, _, _ = _load_originals(ws, i)
    rows: list[tuple[str, list[np.ndarray]]] = [("clean", list(x))]
    for a in cfg.arms:
        if a != "none":
            rows.append((f"{a} attacked", list(_load_adv(ws, a, i)[0])))
    for a in cfg.arms:
        for spec in cfg.purifiers:
            if spec.kind != "identity" and a != "none":
                rows.append((f"{a}/{spec.label}", list(_load_purified(ws, a, spec.label, i)[0])))
    for a in cfg.arms:
        for spec in cfg.purifiers:
            samples, _ = _read_samples(ws, f"{a}/{spec.label}/{_ident(i)}")
            rows.append((f"gen {a}/{spec.label}", list(samples[:4])))
    key = _ident(i)
    return {
        f"reports/grids/{key}.png": png_bytes(plotting.tile([imgs for _, imgs in rows])),
        f"reports/figures/{key}_panel.png": plotting.identity_panel(rows),
    }


STAGE_FUNCS = {
    "gen_data": cmd_gen_data,
    "train_base": cmd_train_base,
    "attack": cmd_attack,
    "purify": cmd_purify,
    "personalize": cmd_personalize,
    "generate": cmd_generate,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


def cmd_run_all(ws: Workspace, arm: str | None = None, purifier: str | None = None) -> int:
    built = 0
    for stage in STAGES:
        built += STAGE_FUNCS[stage](ws, arm=arm, purifier=purifier)
    return built


def run_stage(cfg: PipelineConfig, stage: str, arm: str | None = None, purifier: str | None = None) -> int:
    ws = Workspace(cfg)
    if stage == "run_all":
        return cmd_run_all(ws, arm=arm, purifier=purifier)
    return STAGE_FUNCS[stage](ws, arm=arm, purifier=purifier)
