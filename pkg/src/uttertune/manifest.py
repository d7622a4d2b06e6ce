"""Run manifests and config files.

Every artifact-producing command writes a ``manifest.txt`` next to its
output: the resolved config snapshot, the input and output paths, the
tool version, and wall-clock timings. The config section uses the same
``key = value`` syntax as a config file, so a run can be reproduced by
feeding the snapshot back through ``--config``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import CorruptFile

_MAGIC = "uttertune-manifest v1"

# Every key a config file may define, with its value type. Commands
# consume the subset they understand, so one file can drive a whole
# pipeline.
CONFIG_KEYS: dict[str, type] = {
    # corpus build
    "sentences": int,
    "tag_fraction": float,
    "kana_fraction": float,
    "seed": int,
    # vocab train
    "vocab_size": int,
    # model shape
    "width": int,
    "layers": int,
    "heads": int,
    "ff_width": int,
    "max_seq": int,
    "model_seed": int,
    # base-model pretraining
    "pretrain_steps": int,
    "pretrain_lr": float,
    "pretrain_batch": int,
    "pretrain_seed": int,
    "warmup_fraction": float,
    # adapter training
    "steps": int,
    "learning_rate": float,
    "batch_size": int,
    "rank": int,
    "alpha": float,
    "dropout": float,
    "scaling": str,
    # generation
    "max_new": int,
    "temperature": float,
    "decode": str,
    # evaluation
    "mode": str,
    "n_test_1": int,
    "n_test_2": int,
    "n_leakage": int,
    "resamples": int,
    "tagged_accent_min": float,
    "kana_cer_max": float,
    "leakage_halfwidth_max": float,
}


def parse_config_file(path) -> dict[str, int | float | str]:
    """Read ``key = value`` lines; ``#`` starts a comment."""
    values: dict[str, int | float | str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, eq, text = (part.strip() for part in line.partition("="))
            if eq != "=" or not key or not text:
                raise CorruptFile(f"{path}:{lineno}: expected 'key = value'")
            if key not in CONFIG_KEYS:
                raise CorruptFile(f"{path}:{lineno}: unknown config key {key!r}")
            if key in values:
                raise CorruptFile(f"{path}:{lineno}: duplicate config key {key!r}")
            try:
                values[key] = CONFIG_KEYS[key](text)
            except ValueError:
                raise CorruptFile(
                    f"{path}:{lineno}: bad {CONFIG_KEYS[key].__name__} "
                    f"value {text!r} for {key}"
                ) from None
    return values


def resolve_config(defaults, file_values, overrides) -> dict:
    """Layer values: built-in defaults, then config file, then flags.

    Only keys present in ``defaults`` are consumed; a flag override of
    ``None`` means the flag was not given.
    """
    resolved = dict(defaults)
    for key, value in file_values.items():
        if key in resolved:
            resolved[key] = value
    for key, value in overrides.items():
        if value is not None:
            if key not in resolved:
                raise KeyError(f"override for unknown config key {key!r}")
            resolved[key] = value
    return resolved


@dataclass(frozen=True)
class RunManifest:
    command: str
    version: str
    config: dict[str, int | float | str] = field(default_factory=dict)
    inputs: dict[str, str] = field(default_factory=dict)
    outputs: dict[str, str] = field(default_factory=dict)
    timings: dict[str, float] = field(default_factory=dict)


def save_manifest(manifest: RunManifest, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(_MAGIC + "\n")
        fh.write(f"command {manifest.command}\n")
        fh.write(f"version {manifest.version}\n")
        for key, value in manifest.config.items():
            fh.write(f"config.{key} {value}\n")
        for name, p in manifest.inputs.items():
            fh.write(f"input.{name} {p}\n")
        for name, p in manifest.outputs.items():
            fh.write(f"output.{name} {p}\n")
        for name, seconds in manifest.timings.items():
            fh.write(f"timing.{name} {seconds:.3f}\n")


def load_manifest(path) -> RunManifest:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != _MAGIC:
        raise CorruptFile(f"{path}: not a manifest file")
    fields = {"command": "", "version": ""}
    config: dict[str, int | float | str] = {}
    inputs: dict[str, str] = {}
    outputs: dict[str, str] = {}
    timings: dict[str, float] = {}
    for lineno, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        key, _, value = line.partition(" ")
        if key in fields:
            fields[key] = value
        elif key.startswith("config."):
            name = key[len("config."):]
            if name not in CONFIG_KEYS:
                raise CorruptFile(f"{path}:{lineno}: unknown config key {name!r}")
            config[name] = CONFIG_KEYS[name](value)
        elif key.startswith("input."):
            inputs[key[len("input."):]] = value
        elif key.startswith("output."):
            outputs[key[len("output."):]] = value
        elif key.startswith("timing."):
            timings[key[len("timing."):]] = float(value)
        else:
            raise CorruptFile(f"{path}:{lineno}: unrecognized line {line!r}")
    if not fields["command"]:
        raise CorruptFile(f"{path}: manifest has no command line")
    return RunManifest(
        command=fields["command"],
        version=fields["version"],
        config=config,
        inputs=inputs,
        outputs=outputs,
        timings=timings,
    )


def manifest_config_text(manifest: RunManifest) -> str:
    """The config snapshot in config-file syntax, for reproduction."""
    return "".join(f"{k} = {v}\n" for k, v in manifest.config.items())
