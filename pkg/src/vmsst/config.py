"""Experiment configuration: one JSON document with full defaulting.

The model's vocab_size and n_languages are derived from the corpus section;
supplying conflicting values is a config error. Relative paths resolve
against the config file's directory.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .corpus import CorpusSpec, vocab_size_for
from .errors import ConfigError
from .model import ModelConfig
from .trainer import TrainingConfig


@dataclass
class EvalSettings:
    k_nn: int = 4
    mining_methods: tuple[str, ...] = ("cosine", "margin")
    report_path: Optional[str] = None

    def __post_init__(self):
        self.mining_methods = tuple(self.mining_methods)  # type: ignore[assignment]
        if self.k_nn < 1:
            raise ConfigError("eval.k_nn must be >= 1")
        for m in self.mining_methods:
            if m not in ("cosine", "margin"):
                raise ConfigError(f"eval.mining_methods has unknown method {m!r}")


@dataclass
class ExperimentPaths:
    corpus_dir: str = "corpus"
    checkpoint_dir: str = "checkpoints"
    report_dir: str = "reports"


@dataclass
class ExperimentConfig:
    corpus: CorpusSpec
    model: ModelConfig
    training: TrainingConfig
    eval: EvalSettings = field(default_factory=EvalSettings)
    paths: ExperimentPaths = field(default_factory=ExperimentPaths)
    base_dir: Path = field(default_factory=Path)

    def corpus_dir(self) -> Path:
        return self.base_dir / self.paths.corpus_dir

    def checkpoint_dir(self) -> Path:
        return self.base_dir / self.paths.checkpoint_dir

    def report_dir(self) -> Path:
        return self.base_dir / self.paths.report_dir

    def report_path(self) -> Path:
        if self.eval.report_path:
            return self.base_dir / self.eval.report_path
        return self.report_dir() / "report.json"

    def to_dict(self) -> dict:
        return {
            "corpus": self.corpus.to_dict(),
            "model": self.model.to_dict(),
            "training": self.training.to_dict(),
            "eval": {
                "k_nn": self.eval.k_nn,
                "mining_methods": list(self.eval.mining_methods),
                "report_path": self.eval.report_path,
            },
            "paths": {
                "corpus_dir": self.paths.corpus_dir,
                "checkpoint_dir": self.paths.checkpoint_dir,
                "report_dir": self.paths.report_dir,
            },
        }


def config_hash(config: ExperimentConfig) -> str:
    blob = json.dumps(config.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def _section(doc: dict, name: str) -> dict:
    sec = doc.get(name, {})
    if not isinstance(sec, dict):
        raise ConfigError(f"config section {name!r} must be an object")
    return dict(sec)


def build_config(doc: dict, base_dir: Path = Path(".")) -> ExperimentConfig:
    known = {"corpus", "model", "training", "eval", "paths"}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"config has unknown sections: {sorted(unknown)}")

    corpus = CorpusSpec.from_dict(_section(doc, "corpus"))

    model_sec = _section(doc, "model")
    derived_v = vocab_size_for(corpus)
    if "vocab_size" in model_sec and model_sec["vocab_size"] != derived_v:
        raise ConfigError(
            f"model.vocab_size {model_sec['vocab_size']} != {derived_v} derived "
            "from the corpus section"
        )
    if "n_languages" in model_sec and model_sec["n_languages"] != corpus.n_languages:
        raise ConfigError(
            f"model.n_languages {model_sec['n_languages']} != corpus.n_languages "
            f"{corpus.n_languages}"
        )
    model_sec.setdefault("model_dim", 64)
    model_sec.setdefault("latent_dim", 32)
    model_sec.setdefault("n_enc_layers", 2)
    model_sec.setdefault("n_dec_layers", 1)
    model_sec.setdefault("n_heads", 4)
    model_sec.setdefault("ff_dim", 256)
    model_sec["vocab_size"] = derived_v
    model_sec["n_languages"] = corpus.n_languages
    model = ModelConfig.from_dict(model_sec)

    training_sec = _section(doc, "training")
    if "lambda" in training_sec:
        training_sec["lam"] = training_sec.pop("lambda")
    training = TrainingConfig.from_dict(training_sec)

    eval_sec = _section(doc, "eval")
    try:
        eval_settings = EvalSettings(**eval_sec)
    except TypeError:
        bad = set(eval_sec) - {"k_nn", "mining_methods", "report_path"}
        raise ConfigError(f"eval config has unknown fields: {sorted(bad)}") from None

    paths_sec = _section(doc, "paths")
    try:
        paths = ExperimentPaths(**paths_sec)
    except TypeError:
        bad = set(paths_sec) - {"corpus_dir", "checkpoint_dir", "report_dir"}
        raise ConfigError(f"paths config has unknown fields: {sorted(bad)}") from None

    return ExperimentConfig(corpus=corpus, model=model, training=training,
                            eval=eval_settings, paths=paths, base_dir=Path(base_dir))


def load_config(path) -> ExperimentConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {p} does not exist")
    try:
        doc = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {p}: invalid JSON: {e}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"config file {p}: top level must be an object")
    return build_config(doc, base_dir=p.resolve().parent)
