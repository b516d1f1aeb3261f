"""Run configuration: one YAML document driving every command.

Validation is fail-fast: unknown keys and bad values are reported with the
offending key and the accepted values before any work starts.
"""

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .data import LabelTaxonomy, PreprocessSpec
from .errors import ConfigError
from .model import ModelConfig
from .synth import SyntheticSpec
from .training import TrainConfig

PIPELINE_VERSION = "0.1.0"

_SECTION_KEYS = {
    "run": {"label", "seed", "output_dir"},
    "taxonomy": {"mode", "class_names"},
    "dataset": {"source", "directory", "synthetic", "split_fractions"},
    "synthetic": {"per_class_count", "image_size", "difficulty", "archetypes"},
    "preprocess": {
        "target_height",
        "target_width",
        "channels",
        "normalization",
        "channel_means",
        "channel_stds",
    },
    "model": {
        "backbone",
        "pretrained_init",
        "backbone_frozen",
        "dense1_units",
        "dropout_rate",
        "dense2_units",
        "pretrained_weights_path",
        "pretrained_checksum",
    },
    "train": {
        "epochs",
        "batch_size",
        "learning_rate",
        "optimizer",
        "momentum",
        "beta1",
        "beta2",
        "early_stop_patience",
        "augment_flips",
    },
    "evaluate": {"split", "batch_size"},
}


@dataclass
class RunConfig:
    label: str
    seed: int
    output_dir: str
    taxonomy: LabelTaxonomy
    source: str  # "synthetic" or "directory"
    dataset_directory: str
    split_fractions: tuple
    synthetic: dict
    preprocess: PreprocessSpec
    model: ModelConfig
    train: TrainConfig
    eval_split: str = "test"
    eval_batch_size: int = 64
    raw: dict = field(default_factory=dict)

    def synthetic_spec(self) -> SyntheticSpec:
        if self.source != "synthetic":
            raise ConfigError("dataset.source is not 'synthetic'")
        return SyntheticSpec(
            taxonomy=self.taxonomy,
            per_class_count=int(self.synthetic.get("per_class_count", 0)),
            image_size=int(self.synthetic.get("image_size", 64)),
            seed=self.seed,
            difficulty=self.synthetic.get("difficulty", "easy"),
            archetypes=tuple(self.synthetic.get("archetypes", ())),
        )

    def checksum(self) -> str:
        return hashlib.sha256(json.dumps(self.raw, sort_keys=True).encode("utf-8")).hexdigest()[:16]


def _check_keys(section_name: str, section: dict):
    allowed = _SECTION_KEYS[section_name]
    for key in section:
        if key not in allowed:
            raise ConfigError(
                f"unknown key {section_name}.{key!r}; accepted keys: {sorted(allowed)}"
            )


def _require(doc: dict, key: str) -> dict:
    if key not in doc:
        raise ConfigError(f"missing required config section {key!r}")
    if not isinstance(doc[key], dict):
        raise ConfigError(f"config section {key!r} must be a mapping")
    return doc[key]


def load_run_config(path, seed_override=None, out_override=None) -> RunConfig:
    try:
        with Path(path).open("r", encoding="utf-8") as fh:
            doc = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config document must be a mapping of sections")

    known_sections = {"run", "taxonomy", "dataset", "preprocess", "model", "train", "evaluate"}
    for section in doc:
        if section not in known_sections:
            raise ConfigError(f"unknown config section {section!r}; accepted: {sorted(known_sections)}")

    run = _require(doc, "run")
    taxonomy = _require(doc, "taxonomy")
    dataset = _require(doc, "dataset")
    preprocess = doc.get("preprocess", {}) or {}
    model = doc.get("model", {}) or {}
    train = doc.get("train", {}) or {}
    evaluate = doc.get("evaluate", {}) or {}
    for name, section in [
        ("run", run),
        ("taxonomy", taxonomy),
        ("dataset", dataset),
        ("preprocess", preprocess),
        ("model", model),
        ("train", train),
        ("evaluate", evaluate),
    ]:
        _check_keys(name, section)
    synthetic = dataset.get("synthetic", {}) or {}
    _check_keys("synthetic", synthetic)

    label = run.get("label", "")
    if not label:
        raise ConfigError("run.label must be a nonempty string")
    seed = int(seed_override if seed_override is not None else run.get("seed", 0))
    output_dir = str(out_override if out_override is not None else run.get("output_dir", f"runs/{label}"))

    source = dataset.get("source")
    if source not in ("synthetic", "directory"):
        raise ConfigError(f"dataset.source must be 'synthetic' or 'directory', got {source!r}")
    if source == "directory" and not dataset.get("directory"):
        raise ConfigError("dataset.directory is required when dataset.source is 'directory'")
    if source == "synthetic" and int(synthetic.get("per_class_count", 0)) < 1:
        raise ConfigError("dataset.synthetic.per_class_count must be >= 1")

    fractions = tuple(float(f) for f in dataset.get("split_fractions", (0.64, 0.16, 0.20)))
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"dataset.split_fractions must be 3 values summing to 1, got {fractions}")

    try:
        tax = LabelTaxonomy(taxonomy.get("mode", ""), tuple(taxonomy.get("class_names", ())))
        pp_kwargs = dict(preprocess)
        for key in ("channel_means", "channel_stds"):
            if key in pp_kwargs:
                pp_kwargs[key] = tuple(pp_kwargs[key])
        pp = PreprocessSpec(**pp_kwargs)
        mc = ModelConfig(input_shape=(pp.target_height, pp.target_width, pp.channels), **model)
        tc = TrainConfig(seed=seed, **train)
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc

    eval_split = evaluate.get("split", "test")
    if eval_split not in ("train", "val", "test"):
        raise ConfigError(f"evaluate.split must be train, val, or test, got {eval_split!r}")

    raw = json.loads(json.dumps(doc, sort_keys=True, default=str))
    raw.setdefault("run", {})
    raw["run"]["seed"] = seed
    # where outputs land is not part of the run's logical identity
    raw["run"].pop("output_dir", None)

    return RunConfig(
        label=label,
        seed=seed,
        output_dir=output_dir,
        taxonomy=tax,
        source=source,
        dataset_directory=str(dataset.get("directory", "")),
        split_fractions=fractions,
        synthetic=synthetic,
        preprocess=pp,
        model=mc,
        train=tc,
        eval_split=eval_split,
        eval_batch_size=int(evaluate.get("batch_size", 64)),
        raw=raw,
    )
