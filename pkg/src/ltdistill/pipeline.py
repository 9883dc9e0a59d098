"""End-to-end pipeline: configuration, staged execution with provenance
caching, and report rendering.

Configuration is a flat key=value file with dotted section keys (see
_SCHEMA; the README carries the full table). Every stage records a
provenance key — a hash of its config slice plus its input artifact hashes —
in manifest.json next to its outputs. Reruns skip stages whose provenance
and outputs are intact; an output whose bytes no longer match the manifest
is treated as tampering and aborts with the stage name.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .augment import CropAugmentConfig
from .data import (
    LongTailDataset,
    LongTailSpec,
    balanced_split,
    gen_blobs,
    load_dataset,
    make_long_tail,
    save_dataset,
)
from .experts import ExpertCheckpoint, ExpertTrainConfig, train_expert
from .initsel import (
    assemble_init,
    build_pool,
    gen_candidates,
    multi_round_select,
    naive_init,
    score_candidates,
    score_pool,
    write_selection_csv,
)
from .nn import ConvNetSpec
from .optim import OptimConfig
from .recalib import load_bundle, recalibrate, running_stats_bundle, save_bundle
from .recovery import RecoveryConfig, recover
from .students import (
    DistilledSet,
    StudentTrainConfig,
    evaluate,
    load_distilled,
    load_image_set,
    relabel,
    save_distilled,
    save_image_set,
    train_student,
)
from .utils import canonical_json, derive_seed, sha256_bytes, sha256_file


class ConfigError(ValueError):
    """Malformed configuration file or invalid key/value."""


class StageError(RuntimeError):
    """A pipeline stage failed; carries the stage name."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


_TRUE = {"true", "1", "yes", "on"}
_FALSE = {"false", "0", "no", "off"}

# key -> (type, default); types: int, float, bool, str, int_list
_SCHEMA = {
    "pipeline.seed": ("int", 0),
    "dataset.kind": ("str", "blobs"),
    "dataset.path": ("str", ""),
    "dataset.classes": ("int", 10),
    "dataset.per_class": ("int", 230),
    "dataset.channels": ("int", 3),
    "dataset.height": ("int", 16),
    "dataset.width": ("int", 16),
    "dataset.noise": ("float", 0.28),
    "dataset.jitter": ("float", 0.10),
    "dataset.ring_prob": ("float", 0.0),
    "test.per_class": ("int", 20),
    "longtail.n0": ("int", 200),
    "longtail.beta": ("float", 10.0),
    "model.depth": ("int", 3),
    "model.width": ("int", 32),
    "model.bn_eps": ("float", 1e-5),
    "expert.iterations": ("int", 500),
    "expert.batch_size": ("int", 64),
    "expert.lr": ("float", 2e-3),
    "expert.optimizer": ("str", "adam"),
    "expert.gamma1": ("float", 0.5),
    "expert.gamma2": ("float", 1.0),
    "expert.q": ("float", 0.5),
    "expert.mixup_alpha": ("float", 1.0),
    "expert.flip_prob": ("float", 0.5),
    "expert.crop_pad": ("int", 2),
    "recalib.batch_size": ("int", 64),
    "distill.ipc": ("int", 10),
    "init.n_aug": ("int", 8),
    "init.area_min": ("float", 0.3),
    "init.area_max": ("float", 1.0),
    "init.flip_prob": ("float", 0.5),
    "init.batch_size": ("int", 256),
    "recovery.iterations": ("int", 400),
    "recovery.lr": ("float", 0.05),
    "recovery.optimizer": ("str", "adam"),
    "recovery.lambda_cw": ("float", 1.0),
    "student.epochs": ("int", 200),
    "student.batch_size": ("int", 64),
    "student.lr": ("float", 2e-3),
    "student.kappa1": ("float", 0.1),
    "student.kappa2": ("float", 1.0),
    "student.seeds": ("int_list", [0, 1, 2]),
    "student.depth": ("int", 0),  # 0 = same as model.depth
    "student.width": ("int", 0),  # 0 = same as model.width
    "ablation.no_debias": ("bool", False),
    "ablation.no_recalibration": ("bool", False),
    "ablation.naive_init": ("bool", False),
}


def _parse_value(key: str, raw, kind):
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            if isinstance(raw, bool):
                return raw
            s = str(raw).strip().lower()
            if s in _TRUE:
                return True
            if s in _FALSE:
                return False
            raise ValueError(raw)
        if kind == "int_list":
            if isinstance(raw, (list, tuple)):
                return [int(v) for v in raw]
            return [int(v) for v in str(raw).split(",") if v.strip() != ""]
        return str(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def _canonical_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, list):
        return ",".join(str(v) for v in value)
    return str(value)


def parse_config_text(text: str) -> dict:
    """key=value lines; '#' starts a comment; blank lines ignored."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = stripped.split("=", 1)
        key = key.strip()
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key}")
        out[key] = value.strip()
    return out


@dataclass
class PipelineConfig:
    values: dict = field(default_factory=dict)

    @staticmethod
    def from_mapping(mapping: dict) -> "PipelineConfig":
        values = {}
        for key, raw in mapping.items():
            if key not in _SCHEMA:
                raise ConfigError(f"unknown configuration key: {key}")
            values[key] = _parse_value(key, raw, _SCHEMA[key][0])
        for key, (kind, default) in _SCHEMA.items():
            values.setdefault(key, default)
        cfg = PipelineConfig(values)
        cfg.validate()
        return cfg

    @staticmethod
    def from_file(path) -> "PipelineConfig":
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        return PipelineConfig.from_mapping(parse_config_text(open(path).read()))

    def validate(self) -> None:
        v = self.values
        if v["dataset.kind"] not in ("blobs", "file"):
            raise ConfigError(f"dataset.kind must be blobs or file, got {v['dataset.kind']}")
        if v["dataset.kind"] == "file" and not os.path.exists(v["dataset.path"]):
            raise ConfigError(f"dataset.path not resolvable: {v['dataset.path']!r}")
        if v["longtail.beta"] < 1.0:
            raise ConfigError("longtail.beta must be >= 1")
        if v["distill.ipc"] < 1:
            raise ConfigError("distill.ipc must be >= 1")
        if not v["student.seeds"]:
            raise ConfigError("student.seeds must not be empty")
        if v["init.area_min"] > v["init.area_max"]:
            raise ConfigError("init.area_min must be <= init.area_max")
        try:
            self.model_spec().validate()
            self.expert_config("observer").validate()
            self.recovery_config().validate()
            self.student_config(0).validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def __getitem__(self, key: str):
        return self.values[key]

    def canonical(self) -> dict:
        return {k: _canonical_value(self.values[k]) for k in sorted(self.values)}

    def slice(self, *prefixes: str) -> dict:
        canon = self.canonical()
        return {
            k: canon[k]
            for k in canon
            if any(k == p or k.startswith(p + ".") for p in prefixes)
        }

    # typed views -----------------------------------------------------------

    def image_shape(self) -> tuple:
        v = self.values
        return (v["dataset.channels"], v["dataset.height"], v["dataset.width"])

    def model_spec(self) -> ConvNetSpec:
        v = self.values
        return ConvNetSpec(
            depth=v["model.depth"],
            width=v["model.width"],
            in_shape=self.image_shape(),
            num_classes=v["dataset.classes"],
            bn_eps=v["model.bn_eps"],
        )

    def student_spec(self) -> ConvNetSpec:
        v = self.values
        return ConvNetSpec(
            depth=v["student.depth"] or v["model.depth"],
            width=v["student.width"] or v["model.width"],
            in_shape=self.image_shape(),
            num_classes=v["dataset.classes"],
            bn_eps=v["model.bn_eps"],
        )

    def longtail_spec(self) -> LongTailSpec:
        v = self.values
        return LongTailSpec(
            num_classes=v["dataset.classes"],
            largest_class_count=v["longtail.n0"],
            imbalance_factor=v["longtail.beta"],
            seed=derive_seed(v["pipeline.seed"], "longtail"),
        )

    def expert_config(self, role: str) -> ExpertTrainConfig:
        v = self.values
        no_debias = v["ablation.no_debias"]
        return ExpertTrainConfig(
            iterations=v["expert.iterations"],
            batch_size=v["expert.batch_size"],
            gamma1=0.0 if no_debias else v["expert.gamma1"],
            gamma2=v["expert.gamma2"],
            q=0.0 if no_debias else v["expert.q"],
            mixup_alpha=v["expert.mixup_alpha"],
            use_mixup=not no_debias,
            flip_prob=v["expert.flip_prob"],
            crop_pad=v["expert.crop_pad"],
            optimizer=OptimConfig(kind=v["expert.optimizer"], lr=v["expert.lr"]),
            seed=derive_seed(v["pipeline.seed"], role),
        )

    def crop_config(self) -> CropAugmentConfig:
        v = self.values
        return CropAugmentConfig(
            area_range=(v["init.area_min"], v["init.area_max"]),
            flip_prob=v["init.flip_prob"],
        )

    def recovery_config(self) -> RecoveryConfig:
        v = self.values
        return RecoveryConfig(
            iterations=v["recovery.iterations"],
            lambda_cw=v["recovery.lambda_cw"],
            optimizer=OptimConfig(kind=v["recovery.optimizer"], lr=v["recovery.lr"]),
            seed=derive_seed(v["pipeline.seed"], "recovery"),
        )

    def student_config(self, seed: int) -> StudentTrainConfig:
        v = self.values
        return StudentTrainConfig(
            epochs=v["student.epochs"],
            batch_size=v["student.batch_size"],
            kappa1=v["student.kappa1"],
            kappa2=v["student.kappa2"],
            optimizer=OptimConfig(kind="adam", lr=v["student.lr"]),
            seed=derive_seed(v["pipeline.seed"], "student", seed),
        )


# ---------------------------------------------------------------------------
# stage bodies (shared by the cached runner and the standalone CLI commands)


def build_source_dataset(config: PipelineConfig) -> LongTailDataset:
    v = config.values
    if v["dataset.kind"] == "file":
        return load_dataset(v["dataset.path"])
    return gen_blobs(
        num_classes=v["dataset.classes"],
        n_per_class=v["dataset.per_class"],
        shape=config.image_shape(),
        seed=derive_seed(v["pipeline.seed"], "blobs"),
        noise=v["dataset.noise"],
        jitter=v["dataset.jitter"],
        ring_prob=v["dataset.ring_prob"],
    )


def build_datasets(config: PipelineConfig):
    """Source -> (long-tailed train set, balanced test set)."""
    source = build_source_dataset(config)
    test, remainder = balanced_split(
        source, config["test.per_class"], derive_seed(config["pipeline.seed"], "test")
    )
    train = make_long_tail(remainder, config.longtail_spec())
    return train, test


def run_init_stage(config: PipelineConfig, train: LongTailDataset, teacher: ExpertCheckpoint):
    """Returns (images, labels, selections-or-None)."""
    ipc = config["distill.ipc"]
    aug_cfg = config.crop_config()
    seed = derive_seed(config["pipeline.seed"], "init")
    if config["ablation.naive_init"]:
        images, labels = naive_init(train, ipc, aug_cfg, seed)
        return images, labels, None
    n_aug = config["init.n_aug"]
    pool = build_pool(train, n_aug, aug_cfg, seed)
    score_pool(teacher, pool, config["init.batch_size"])

    def regen(class_id: int, round_idx: int):
        from .initsel import Candidate

        fresh = []
        for row in np.asarray(train.per_class_index[class_id]):
            row = int(row)
            imgs = gen_candidates(
                train.images[row], n_aug, aug_cfg, derive_seed(seed, "aug", row, round_idx)
            )
            fresh.extend(
                Candidate(
                    source_image_id=row,
                    augmentation_id=round_idx * n_aug + j,
                    image=im,
                )
                for j, im in enumerate(imgs)
            )
        score_candidates(teacher, fresh, class_id, config["init.batch_size"])
        return fresh

    selections = multi_round_select(pool, ipc, regen=regen)
    images, labels = assemble_init(selections, ipc, train.num_classes)
    return images, labels, selections


def run_eval_stage(config: PipelineConfig, distilled: DistilledSet, test: LongTailDataset):
    """Train one student per listed seed and evaluate; returns EvalReports."""
    reports = []
    for seed in config["student.seeds"]:
        student = train_student(
            distilled, config.student_spec(), config.student_config(seed)
        )
        reports.append(evaluate(student, test, seed=seed))
    return reports


def write_eval_csv(path, reports) -> None:
    import csv

    num_classes = reports[0].per_class.size
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["seed", "overall", "balanced"] + [f"acc_class_{c}" for c in range(num_classes)]
        )
        for rep in reports:
            row = [rep.seeds[0], f"{rep.overall:.6f}", f"{rep.balanced:.6f}"]
            row += [f"{a:.6f}" for a in rep.per_class]
            writer.writerow(row)


def read_eval_csv(path):
    import csv

    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{path}: empty evaluation results")
    return rows


# ---------------------------------------------------------------------------
# cached runner


@dataclass
class Manifest:
    artifacts: dict = field(default_factory=dict)  # name -> {file, sha256, stage}
    stages: dict = field(default_factory=dict)  # stage -> {prov, outputs}

    @staticmethod
    def load(path) -> "Manifest":
        if not os.path.exists(path):
            return Manifest()
        raw = json.loads(open(path).read())
        return Manifest(artifacts=raw.get("artifacts", {}), stages=raw.get("stages", {}))

    def save(self, path) -> None:
        blob = json.dumps(
            {"artifacts": self.artifacts, "stages": self.stages},
            sort_keys=True,
            indent=2,
        )
        with open(path, "w") as fh:
            fh.write(blob + "\n")


class PipelineRunner:
    """Executes the stage chain in order, skipping intact cached stages."""

    STAGES = ("dataset", "observer", "teacher", "recalibrate", "init", "recover", "relabel", "eval")

    def __init__(self, config: PipelineConfig, outdir, log=None):
        self.config = config
        self.outdir = str(outdir)
        self.log = log or (lambda msg: None)
        os.makedirs(self.outdir, exist_ok=True)
        self.manifest_path = os.path.join(self.outdir, "manifest.json")
        self.manifest = Manifest.load(self.manifest_path)

    def path(self, rel: str) -> str:
        return os.path.join(self.outdir, rel)

    def _input_hashes(self, stage: str, inputs) -> dict:
        hashes = {}
        for name in inputs:
            rec = self.manifest.artifacts.get(name)
            if rec is None:
                raise StageError(stage, f"missing input artifact {name}")
            path = self.path(rec["file"])
            if not os.path.exists(path):
                raise StageError(stage, f"input artifact file missing: {rec['file']}")
            cur = sha256_file(path)
            if cur != rec["sha256"]:
                raise StageError(
                    stage,
                    f"provenance mismatch: input {name} ({rec['file']}) was "
                    f"modified outside the pipeline",
                )
            hashes[name] = cur
        return hashes

    def _outputs_intact(self, stage: str, outputs) -> bool:
        for name, rel in outputs.items():
            rec = self.manifest.artifacts.get(name)
            if rec is None or rec["file"] != rel:
                return False
            path = self.path(rel)
            if not os.path.exists(path):
                return False
            if sha256_file(path) != rec["sha256"]:
                raise StageError(
                    stage,
                    f"provenance mismatch: output {name} ({rel}) was modified "
                    f"outside the pipeline",
                )
        return True

    def _stage(self, stage: str, cfg_slice: dict, inputs, outputs: dict, fn) -> None:
        input_hashes = self._input_hashes(stage, inputs)
        prov = sha256_bytes(
            canonical_json(
                {"stage": stage, "config": cfg_slice, "inputs": input_hashes}
            ).encode("utf-8")
        )
        cached = self.manifest.stages.get(stage)
        if cached and cached["prov"] == prov and self._outputs_intact(stage, outputs):
            self.log(f"[{stage}] cached, skipping")
            return
        self.log(f"[{stage}] running")
        try:
            fn()
        except StageError:
            raise
        except Exception as exc:
            raise StageError(stage, str(exc)) from exc
        for name, rel in outputs.items():
            path = self.path(rel)
            if not os.path.exists(path):
                raise StageError(stage, f"stage did not produce {rel}")
            self.manifest.artifacts[name] = {
                "file": rel,
                "sha256": sha256_file(path),
                "stage": stage,
            }
        self.manifest.stages[stage] = {"prov": prov, "outputs": sorted(outputs)}
        self.manifest.save(self.manifest_path)

    # stage wiring ----------------------------------------------------------

    def run(self) -> Manifest:
        cfg = self.config

        self._stage(
            "dataset",
            cfg.slice("pipeline", "dataset", "test", "longtail"),
            [],
            {"train": "train.bin", "test": "test.bin"},
            self._do_dataset,
        )
        for role in ("observer", "teacher"):
            self._stage(
                role,
                {**cfg.slice("pipeline", "model", "expert", "ablation.no_debias"), "role": role},
                ["train"],
                {role: f"{role}.ckpt", f"{role}_log": f"{role}_log.csv"},
                lambda role=role: self._do_expert(role),
            )
        self._stage(
            "recalibrate",
            cfg.slice("pipeline", "recalib", "ablation.no_recalibration"),
            ["train", "observer"],
            {"stats": "stats.bin"},
            self._do_recalibrate,
        )
        init_outputs = {
            "init_images": "init/images.bin",
            "init_labels": "init/hard_labels.bin",
        }
        if not cfg["ablation.naive_init"]:
            init_outputs["selection"] = "init/selection.csv"
        self._stage(
            "init",
            cfg.slice("pipeline", "distill", "init", "ablation.naive_init"),
            ["train", "teacher"],
            init_outputs,
            self._do_init,
        )
        self._stage(
            "recover",
            cfg.slice("pipeline", "recovery"),
            ["init_images", "init_labels", "observer", "stats"],
            {
                "recovered_images": "recovered/images.bin",
                "recovered_labels": "recovered/hard_labels.bin",
                "recovery_log": "recovery_log.csv",
            },
            self._do_recover,
        )
        self._stage(
            "relabel",
            cfg.slice("pipeline", "distill.ipc"),
            ["recovered_images", "recovered_labels", "teacher", "observer", "stats"],
            {
                "distilled_images": "distilled/images.bin",
                "distilled_labels": "distilled/hard_labels.bin",
                "distilled_soft": "distilled/soft_labels.bin",
                "distilled_prov": "distilled/provenance.txt",
            },
            self._do_relabel,
        )
        self._stage(
            "eval",
            cfg.slice("pipeline", "student"),
            ["distilled_images", "distilled_labels", "distilled_soft", "test"],
            {"eval_results": "distilled/report.csv"},
            self._do_eval,
        )
        return self.manifest

    def _do_dataset(self) -> None:
        train, test = build_datasets(self.config)
        save_dataset(self.path("train.bin"), train)
        save_dataset(self.path("test.bin"), test)

    def _do_expert(self, role: str) -> None:
        train = load_dataset(self.path("train.bin"))
        ck = train_expert(
            train,
            self.config.model_spec(),
            self.config.expert_config(role),
            log_path=self.path(f"{role}_log.csv"),
        )
        ck.meta["role"] = role
        ck.save(self.path(f"{role}.ckpt"))

    def _do_recalibrate(self) -> None:
        train = load_dataset(self.path("train.bin"))
        observer = ExpertCheckpoint.load(self.path("observer.ckpt"))
        from .data import dataset_hash

        if self.config["ablation.no_recalibration"]:
            bundle = running_stats_bundle(
                observer, train.num_classes, dataset_hash_=dataset_hash(train)
            )
        else:
            bundle = recalibrate(observer, train, self.config["recalib.batch_size"])
        save_bundle(self.path("stats.bin"), bundle)

    def _do_init(self) -> None:
        train = load_dataset(self.path("train.bin"))
        teacher = ExpertCheckpoint.load(self.path("teacher.ckpt"))
        images, labels, selections = run_init_stage(self.config, train, teacher)
        os.makedirs(self.path("init"), exist_ok=True)
        save_image_set(self.path("init"), images, labels)
        if selections is not None:
            write_selection_csv(self.path("init/selection.csv"), selections)

    def _do_recover(self) -> None:
        observer = ExpertCheckpoint.load(self.path("observer.ckpt"))
        bundle = load_bundle(self.path("stats.bin"))
        images, labels = load_image_set(self.path("init"))
        recovered, report = recover(
            images, observer, bundle, self.config.recovery_config(), labels=labels
        )
        os.makedirs(self.path("recovered"), exist_ok=True)
        save_image_set(self.path("recovered"), recovered, labels)
        report.to_csv(self.path("recovery_log.csv"))

    def _do_relabel(self) -> None:
        teacher = ExpertCheckpoint.load(self.path("teacher.ckpt"))
        observer = ExpertCheckpoint.load(self.path("observer.ckpt"))
        bundle = load_bundle(self.path("stats.bin"))
        images, labels = load_image_set(self.path("recovered"))
        soft = relabel(teacher, images)
        from .recalib import bundle_bytes

        distilled = DistilledSet(
            images=images,
            hard_labels=labels,
            soft_labels=soft,
            ipc=self.config["distill.ipc"],
            provenance={
                "observer": observer.content_hash(),
                "teacher": teacher.content_hash(),
                "bundle": sha256_bytes(bundle_bytes(bundle)),
            },
        )
        save_distilled(self.path("distilled"), distilled)

    def _do_eval(self) -> None:
        distilled = load_distilled(self.path("distilled"))
        test = load_dataset(self.path("test.bin"))
        reports = run_eval_stage(self.config, distilled, test)
        write_eval_csv(self.path("distilled/report.csv"), reports)


def run_pipeline(config: PipelineConfig, outdir, deterministic: bool = False, log=None) -> Manifest:
    """Run all stages; with deterministic=True, single-threaded BLAS."""
    if deterministic:
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=1):
            return PipelineRunner(config, outdir, log=log).run()
    return PipelineRunner(config, outdir, log=log).run()


# ---------------------------------------------------------------------------
# report rendering


def _svg_bar_chart(per_class_mean, width=640, height=360) -> str:
    """Standalone per-class accuracy bar chart; deterministic output."""
    c = len(per_class_mean)
    margin_l, margin_b, margin_t = 50, 40, 20
    plot_w = width - margin_l - 20
    plot_h = height - margin_t - margin_b
    bar_w = plot_w / c
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
    ]
    for frac in (0.0, 0.25, 0.5, 0.75, 1.0):
        y = margin_t + plot_h * (1 - frac)
        parts.append(
            f'<line x1="{margin_l}" y1="{y:.1f}" x2="{width - 20}" y2="{y:.1f}" '
            f'stroke="#cccccc" stroke-width="1"/>'
        )
        parts.append(
            f'<text x="{margin_l - 8}" y="{y + 4:.1f}" font-size="12" '
            f'text-anchor="end" font-family="sans-serif">{frac:.2f}</text>'
        )
    for i, acc in enumerate(per_class_mean):
        x = margin_l + i * bar_w
        h = plot_h * float(acc)
        y = margin_t + plot_h - h
        parts.append(
            f'<rect x="{x + bar_w * 0.1:.1f}" y="{y:.1f}" width="{bar_w * 0.8:.1f}" '
            f'height="{h:.1f}" fill="#4878a8"/>'
        )
        parts.append(
            f'<text x="{x + bar_w / 2:.1f}" y="{height - margin_b + 16}" font-size="12" '
            f'text-anchor="middle" font-family="sans-serif">{i}</text>'
        )
    parts.append(
        f'<text x="{margin_l + plot_w / 2:.1f}" y="{height - 6}" font-size="13" '
        f'text-anchor="middle" font-family="sans-serif">class</text>'
    )
    parts.append(
        '<text x="14" y="190" font-size="13" text-anchor="middle" '
        'font-family="sans-serif" transform="rotate(-90 14 190)">accuracy</text>'
    )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def render_report(artifacts_dir, out_dir=None) -> dict:
    """Summarize eval results into summary.csv, per_class.csv and an SVG
    bar chart of per-class accuracy; returns the written paths."""
    import csv

    artifacts_dir = str(artifacts_dir)
    out_dir = str(out_dir or artifacts_dir)
    results_path = os.path.join(artifacts_dir, "distilled", "report.csv")
    if not os.path.exists(results_path):
        raise FileNotFoundError(
            f"missing evaluation artifacts: {results_path} (run the eval stage first)"
        )
    rows = read_eval_csv(results_path)
    class_cols = [k for k in rows[0] if k.startswith("acc_class_")]
    class_cols.sort(key=lambda k: int(k.rsplit("_", 1)[1]))
    os.makedirs(out_dir, exist_ok=True)

    summary_path = os.path.join(out_dir, "summary.csv")
    with open(summary_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["seed", "overall", "balanced"])
        overall, balanced = [], []
        for r in rows:
            writer.writerow([r["seed"], r["overall"], r["balanced"]])
            overall.append(float(r["overall"]))
            balanced.append(float(r["balanced"]))
        writer.writerow(
            ["mean", f"{np.mean(overall):.6f}", f"{np.mean(balanced):.6f}"]
        )

    per_class_path = os.path.join(out_dir, "per_class.csv")
    per_class_mean = []
    with open(per_class_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class", "mean_accuracy"] + [f"seed_{r['seed']}" for r in rows])
        for col in class_cols:
            cls = int(col.rsplit("_", 1)[1])
            vals = [float(r[col]) for r in rows]
            per_class_mean.append(float(np.mean(vals)))
            writer.writerow(
                [cls, f"{np.mean(vals):.6f}"] + [f"{v:.6f}" for v in vals]
            )

    chart_path = os.path.join(out_dir, "per_class_accuracy.svg")
    with open(chart_path, "w") as fh:
        fh.write(_svg_bar_chart(per_class_mean))
    return {"summary": summary_path, "per_class": per_class_path, "chart": chart_path}
