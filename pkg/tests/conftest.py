"""Shared fixtures: one full reference pipeline run reused across tests.

The reference run drives every stage through the real CLI with the
checked-in desk configuration, exactly as a user would run it. It is
session-scoped because training takes minutes; tests that only need the
artifacts (reports, manifests, model files) all share the same run.
"""

import time
from pathlib import Path
from types import SimpleNamespace

import pytest

from uttertune import cli
from uttertune.manifest import parse_config_file

CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"
DESK_CFG = CONFIG_DIR / "desk.cfg"
ADAPTER_CORPUS_CFG = CONFIG_DIR / "desk_adapter_corpus.cfg"

EVAL_MODES = ("tagged", "kana", "plain")


def run_pipeline(root: Path) -> SimpleNamespace:
    """corpus x2 -> vocab -> train -> eval x3 (+leakage) via the CLI.

    Returns stage wall times, exit codes, and artifact paths. Stages that
    must succeed assert immediately; eval exit codes are reported as-is so
    threshold checks stay in the tests that own them.
    """
    timings: dict[str, float] = {}
    rcs: dict[str, int] = {}

    def stage(name: str, argv: list[str], ok=(0,)) -> None:
        t0 = time.perf_counter()
        rcs[name] = cli.main(argv)
        timings[name] = time.perf_counter() - t0
        assert rcs[name] in ok, f"stage {name} exited {rcs[name]}"

    cfg = str(DESK_CFG)
    c1 = root / "corpus_pretrain"
    c2 = root / "corpus_adapter"
    vocab = root / "vocab"
    train = root / "train"
    evals = {mode: root / f"eval_{mode}" for mode in EVAL_MODES}

    stage("corpus_pretrain",
          ["--config", cfg, "corpus", "build", "--out", str(c1)])
    stage("corpus_adapter",
          ["--config", str(ADAPTER_CORPUS_CFG), "corpus", "build",
           "--out", str(c2)])
    stage("vocab",
          ["--config", cfg, "vocab", "train",
           "--corpus", str(c1 / "corpus.tsv"), "--out", str(vocab)])
    stage("train",
          ["--config", cfg, "train",
           "--corpus", str(c1 / "corpus.tsv"),
           "--adapter-corpus", str(c2 / "corpus.tsv"),
           "--vocab", str(vocab / "vocab.txt"), "--out", str(train)])
    for mode in EVAL_MODES:
        argv = ["--config", cfg, "eval",
                "--model", str(train / "base_model.ut"),
                "--vocab", str(vocab / "vocab.txt"),
                "--adapter", str(train / "adapter.ut"),
                "--mode", mode, "--out", str(evals[mode])]
        if mode == "tagged":
            argv.append("--leakage")
        stage(f"eval_{mode}", argv, ok=(0, 4))

    return SimpleNamespace(
        root=root,
        timings=timings,
        exit_codes=rcs,
        wall=sum(timings.values()),
        corpus_pretrain=c1 / "corpus.tsv",
        corpus_adapter=c2 / "corpus.tsv",
        vocab=vocab / "vocab.txt",
        base_model=train / "base_model.ut",
        adapter=train / "adapter.ut",
        train_dir=train,
        reports={m: evals[m] / f"report_{m}.tsv" for m in EVAL_MODES},
        leakage=evals["tagged"] / "leakage.tsv",
        eval_dirs=evals,
        stage_dirs={"corpus_pretrain": c1, "corpus_adapter": c2,
                    "vocab": vocab, "train": train},
    )


@pytest.fixture(scope="session")
def desk_config() -> dict:
    return parse_config_file(DESK_CFG)


@pytest.fixture(scope="session")
def reference_run(tmp_path_factory) -> SimpleNamespace:
    return run_pipeline(tmp_path_factory.mktemp("reference_run"))
