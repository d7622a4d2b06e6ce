"""Single command-line entry point for the whole workflow.

Subcommands: ``notation parse|render|pitch|morae``, ``corpus build``,
``vocab train``, ``train``, ``generate``, ``eval``, and ``adapter
merge|info``. Every artifact-producing command writes a ``manifest.txt``
next to its output; re-feeding the manifest's config snapshot through
``--config`` reproduces the run.

Exit codes: 0 success, 1 usage error (including malformed notation
input), 2 data error (unreadable or inconsistent files, bad config
values), 3 numeric failure during training or generation, 4 evaluation
threshold from the config unmet.
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

from . import __version__
from .dataprep import (
    SPEECH_TOKEN_COUNT,
    build_corpus,
    build_eval_sets,
    build_lexicon,
    codes_to_kana,
    codes_to_pitch,
    decode_speech_ids,
    load_corpus,
    save_corpus,
    to_training_examples,
    vocab_training_text,
)
from .errors import NonFiniteLoss, SequenceTooLong, ShapeMismatch, UtterTuneError
from .eval import (
    EVAL_MODES,
    evaluate_set,
    format_summary,
    leakage_test,
    save_leakage,
    save_report,
)
from .lora import (
    SCALING_MODES,
    init_adapter,
    load_adapter,
    merge,
    save_adapter,
    trainable_param_count,
)
from .manifest import (
    RunManifest,
    parse_config_file,
    resolve_config,
    save_manifest,
)
from .model import ToyLM, ToyLMConfig, TrainConfig, generate, pretrain, train_adapter
from .notation import parse_annotation, phrase_pitch
from .tokenizer import encode_text, load_vocab, save_vocab, train_bpe

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3
EXIT_THRESHOLD = 4

_THRESHOLD_KEYS = ("tagged_accent_min", "kana_cer_max", "leakage_halfwidth_max")

_CORPUS_DEFAULTS = {
    "sentences": 400,
    "tag_fraction": 0.0,
    "kana_fraction": 0.0,
    "seed": 0,
}
_VOCAB_DEFAULTS = {"vocab_size": 180, "seed": 0}
_TRAIN_DEFAULTS = {
    "width": 64,
    "layers": 2,
    "heads": 4,
    "ff_width": 256,
    "max_seq": 256,
    "model_seed": 0,
    "pretrain_steps": 3000,
    "pretrain_lr": 3e-4,
    "pretrain_batch": 8,
    "pretrain_seed": 0,
    "warmup_fraction": 0.1,
    "steps": 3000,
    "learning_rate": 1e-3,
    "batch_size": 8,
    "rank": 16,
    "alpha": 64.0,
    "dropout": 0.05,
    "scaling": "literal",
    "seed": 0,
}
_GENERATE_DEFAULTS = {
    "max_new": 40,
    "temperature": 1.0,
    "seed": 0,
    "decode": "greedy",
}
_EVAL_DEFAULTS = {
    "mode": "plain",
    "seed": 0,
    "n_test_1": 48,
    "n_test_2": 120,
    "n_leakage": 240,
    "max_new": 40,
    "resamples": 10_000,
}


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems through exit code 1."""

    def error(self, message):
        raise _UsageError(f"{self.prog}: {message}")


# -- shared plumbing -------------------------------------------------------


def _read_text(arg: str | None) -> str:
    if arg is None or arg == "-":
        return sys.stdin.read().strip("\n")
    return arg


def _file_config(args) -> dict:
    return parse_config_file(args.config) if getattr(args, "config", None) else {}


def _resolve(args, defaults, file_values) -> dict:
    overrides = {k: getattr(args, k, None) for k in defaults}
    return resolve_config(defaults, file_values, overrides)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(out: Path, command, config, inputs, outputs, timings) -> None:
    manifest = RunManifest(
        command=command,
        version=__version__,
        config=config,
        inputs={k: str(v) for k, v in inputs.items()},
        outputs={k: str(v) for k, v in outputs.items()},
        timings=timings,
    )
    save_manifest(manifest, out / "manifest.txt")


def _load_model_and_adapter(args):
    model = ToyLM.load(args.model)
    adapter = None
    if getattr(args, "adapter", None):
        adapter = load_adapter(args.adapter)
        _check_pairing(model, adapter)
    return model, adapter


def _check_pairing(model: ToyLM, adapter) -> None:
    spec = adapter.base_spec
    if (spec.n_layers, spec.width) != (model.config.layers, model.config.width):
        raise ShapeMismatch(
            f"adapter was built for a {spec.n_layers}-layer width-{spec.width} "
            f"model, got {model.config.layers} layers at width {model.config.width}"
        )
    if spec.fingerprint and spec.fingerprint != model.fingerprint():
        raise ShapeMismatch(
            f"adapter base fingerprint {spec.fingerprint} does not match "
            f"model fingerprint {model.fingerprint()}"
        )


def _write_curve(path: Path, curve) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("step\tloss\n")
        for step, loss in curve:
            fh.write(f"{step}\t{loss!r}\n")


# -- notation --------------------------------------------------------------


def _cmd_notation(args) -> int:
    try:
        text = _read_text(args.text)
        if args.action == "parse":
            annotation = parse_annotation(text)
            for phrase in annotation.phrases:
                morae = " ".join(m.surface for m in phrase.morae)
                print(f"phrase {morae} nucleus {phrase.nucleus or 0}")
        elif args.action == "render":
            phrases = []
            for line in text.splitlines():
                tokens = line.split()
                if (
                    len(tokens) < 4
                    or tokens[0] != "phrase"
                    or tokens[-2] != "nucleus"
                ):
                    raise _UsageError(
                        f"render expects 'phrase <morae...> nucleus <n>' lines, "
                        f"got {line!r}"
                    )
                morae, nucleus = tokens[1:-2], int(tokens[-1])
                if nucleus:
                    body = "".join(morae[:nucleus]) + "'" + "".join(morae[nucleus:])
                else:
                    body = "".join(morae)
                phrases.append(body)
            notated = "/".join(phrases)
            parse_annotation(notated)  # validate before echoing
            print(notated)
        elif args.action == "pitch":
            annotation = parse_annotation(text)
            print(
                " ".join(
                    "".join(phrase_pitch(p)) for p in annotation.phrases
                )
            )
        else:  # morae
            annotation = parse_annotation(text)
            print(
                " / ".join(
                    " ".join(m.surface for m in p.morae)
                    for p in annotation.phrases
                )
            )
    except (UtterTuneError, ValueError) as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


# -- corpus / vocab ----------------------------------------------------------


def _cmd_corpus_build(args) -> int:
    config = _resolve(args, _CORPUS_DEFAULTS, _file_config(args))
    out = _out_dir(args)
    started = time.perf_counter()
    records = build_corpus(
        build_lexicon(),
        config["sentences"],
        config["tag_fraction"],
        seed=config["seed"],
        kana_fraction=config["kana_fraction"],
    )
    corpus_path = out / "corpus.tsv"
    save_corpus(records, corpus_path)
    elapsed = time.perf_counter() - started
    _write_manifest(
        out, "corpus build", config, {}, {"corpus": corpus_path},
        {"total": elapsed},
    )
    print(f"wrote {len(records)} sentences to {corpus_path}")
    return EXIT_OK


def _cmd_vocab_train(args) -> int:
    config = _resolve(args, _VOCAB_DEFAULTS, _file_config(args))
    out = _out_dir(args)
    started = time.perf_counter()
    records = load_corpus(args.corpus)
    texts = vocab_training_text(records, build_lexicon())
    vocab = train_bpe(
        texts,
        config["vocab_size"],
        seed=config["seed"],
        speech_token_count=SPEECH_TOKEN_COUNT,
    )
    vocab_path = out / "vocab.txt"
    save_vocab(vocab, vocab_path)
    elapsed = time.perf_counter() - started
    _write_manifest(
        out, "vocab train", config, {"corpus": args.corpus},
        {"vocab": vocab_path}, {"total": elapsed},
    )
    print(
        f"vocab: {vocab.total_size} ids = {vocab.base_size} text + 2 tags "
        f"+ {vocab.speech_token_count} speech -> {vocab_path}"
    )
    return EXIT_OK


# -- training -----------------------------------------------------------------


def _cmd_train(args) -> int:
    config = _resolve(args, _TRAIN_DEFAULTS, _file_config(args))
    out = _out_dir(args)
    vocab = load_vocab(args.vocab)
    pretrain_records = load_corpus(args.corpus)
    adapter_records = load_corpus(args.adapter_corpus)

    model_config = ToyLMConfig(
        vocab_size=vocab.total_size,
        speech_offset=vocab.speech_token_offset,
        speech_count=vocab.speech_token_count,
        layers=config["layers"],
        width=config["width"],
        heads=config["heads"],
        ff_width=config["ff_width"],
        max_seq=config["max_seq"],
        seed=config["model_seed"],
    )
    model = ToyLM.init(model_config)

    started = time.perf_counter()
    pretrain_curve = pretrain(
        model,
        to_training_examples(pretrain_records, vocab),
        TrainConfig(
            steps=config["pretrain_steps"],
            learning_rate=config["pretrain_lr"],
            warmup_fraction=config["warmup_fraction"],
            batch_size=config["pretrain_batch"],
            seed=config["pretrain_seed"],
        ),
    )
    pretrain_seconds = time.perf_counter() - started

    adapter = init_adapter(
        model.shape_spec(),
        r=config["rank"],
        alpha=config["alpha"],
        dropout_rate=config["dropout"],
        seed=config["seed"],
        scaling=config["scaling"],
    )
    started = time.perf_counter()
    adapter_curve = train_adapter(
        model,
        adapter,
        to_training_examples(adapter_records, vocab),
        TrainConfig(
            steps=config["steps"],
            learning_rate=config["learning_rate"],
            warmup_fraction=config["warmup_fraction"],
            batch_size=config["batch_size"],
            seed=config["seed"],
        ),
    )
    adapter_seconds = time.perf_counter() - started

    model_path = out / "base_model.ut"
    adapter_path = out / "adapter.ut"
    model.save(model_path)
    save_adapter(adapter, adapter_path)
    _write_curve(out / "pretrain_curve.tsv", pretrain_curve)
    _write_curve(out / "adapter_curve.tsv", adapter_curve)
    _write_manifest(
        out,
        "train",
        config,
        {
            "corpus": args.corpus,
            "adapter_corpus": args.adapter_corpus,
            "vocab": args.vocab,
        },
        {
            "base_model": model_path,
            "adapter": adapter_path,
            "pretrain_curve": out / "pretrain_curve.tsv",
            "adapter_curve": out / "adapter_curve.tsv",
        },
        {"pretrain": pretrain_seconds, "adapter": adapter_seconds},
    )
    count, ratio = trainable_param_count(adapter)
    print(
        f"pretrain loss {pretrain_curve[-1][1]:.4f} "
        f"({pretrain_seconds:.1f}s), adapter loss {adapter_curve[-1][1]:.4f} "
        f"({adapter_seconds:.1f}s), trainable {count} params "
        f"(ratio {ratio:.6f})"
    )
    return EXIT_OK


# -- generation ----------------------------------------------------------------


def _cmd_generate(args) -> int:
    config = _resolve(args, _GENERATE_DEFAULTS, _file_config(args))
    model, adapter = _load_model_and_adapter(args)
    vocab = load_vocab(args.vocab)
    text = _read_text(args.text)
    started = time.perf_counter()
    prompt = encode_text(text, vocab)
    budget = min(config["max_new"], model.config.max_seq - len(prompt))
    if budget <= 0:
        raise SequenceTooLong(
            f"prompt occupies {len(prompt)} of {model.config.max_seq} positions"
        )
    ids = generate(
        model,
        prompt,
        budget,
        mode=config["decode"],
        seed=config["seed"],
        temperature=config["temperature"],
        adapter=adapter,
    )
    elapsed = time.perf_counter() - started
    codes = decode_speech_ids(ids, vocab.speech_token_offset)
    kana = codes_to_kana(codes)
    pitch = codes_to_pitch(codes)
    print(kana)
    print(pitch)
    print(" ".join(str(i) for i in ids))
    if args.out:
        out = _out_dir(args)
        gen_path = out / "generation.tsv"
        with open(gen_path, "w", encoding="utf-8") as fh:
            fh.write("text\tids\tkana\tpitch\n")
            fh.write(f"{text}\t{' '.join(str(i) for i in ids)}\t{kana}\t{pitch}\n")
        inputs = {"model": args.model, "vocab": args.vocab}
        if args.adapter:
            inputs["adapter"] = args.adapter
        _write_manifest(
            out, "generate", config, inputs,
            {"generation": gen_path}, {"total": elapsed},
        )
    return EXIT_OK


# -- evaluation -----------------------------------------------------------------


def _cmd_eval(args) -> int:
    file_values = _file_config(args)
    config = _resolve(args, _EVAL_DEFAULTS, file_values)
    thresholds = {k: file_values[k] for k in _THRESHOLD_KEYS if k in file_values}
    if args.leakage and not args.adapter:
        raise _UsageError("eval --leakage requires --adapter")
    out = _out_dir(args)
    model, adapter = _load_model_and_adapter(args)
    vocab = load_vocab(args.vocab)

    started = time.perf_counter()
    sets = build_eval_sets(
        build_lexicon(),
        seed=config["seed"],
        n_test_1=config["n_test_1"],
        n_test_2=config["n_test_2"],
        n_leakage=config["n_leakage"],
    )
    report = evaluate_set(
        model,
        vocab,
        sets.test_set_2,
        config["mode"],
        adapter=adapter,
        max_new=config["max_new"],
    )
    report_path = out / f"report_{config['mode']}.tsv"
    save_report(report, report_path)
    print(format_summary([report]))

    failures = []
    if config["mode"] == "tagged" and "tagged_accent_min" in thresholds:
        if report.accent_rate < thresholds["tagged_accent_min"]:
            failures.append(
                f"accent correctness {report.accent_rate:.4f} "
                f"< tagged_accent_min {thresholds['tagged_accent_min']}"
            )
    if config["mode"] == "kana" and "kana_cer_max" in thresholds:
        if report.mean_cer > thresholds["kana_cer_max"]:
            failures.append(
                f"CER {report.mean_cer:.4f} > kana_cer_max "
                f"{thresholds['kana_cer_max']}"
            )

    outputs = {"report": report_path}
    if args.leakage:
        result = leakage_test(
            model,
            vocab,
            sets.leakage_set,
            adapter,
            resamples=config["resamples"],
            seed=config["seed"],
            max_new=config["max_new"],
        )
        leakage_path = out / "leakage.tsv"
        save_leakage(result, leakage_path)
        outputs["leakage"] = leakage_path
        print(
            f"leakage: baseline {result.baseline_rate:.3f} adapted "
            f"{result.adapted_rate:.3f} diff {result.difference:+.3f} "
            f"CI [{result.ci_low:+.3f}, {result.ci_high:+.3f}]"
        )
        if "leakage_halfwidth_max" in thresholds:
            halfwidth = (result.ci_high - result.ci_low) / 2.0
            if not (
                result.ci_low <= 0.0 <= result.ci_high
                and halfwidth <= thresholds["leakage_halfwidth_max"]
            ):
                failures.append(
                    f"leakage CI [{result.ci_low:+.4f}, {result.ci_high:+.4f}] "
                    f"must contain 0 with half-width <= "
                    f"{thresholds['leakage_halfwidth_max']}"
                )
    elapsed = time.perf_counter() - started

    inputs = {"model": args.model, "vocab": args.vocab}
    if args.adapter:
        inputs["adapter"] = args.adapter
    _write_manifest(
        out, "eval", {**config, **thresholds}, inputs, outputs,
        {"total": elapsed},
    )
    for failure in failures:
        print(f"threshold unmet: {failure}", file=sys.stderr)
    return EXIT_THRESHOLD if failures else EXIT_OK


# -- adapter management ------------------------------------------------------------


def _cmd_adapter_merge(args) -> int:
    model = ToyLM.load(args.model)
    adapter = load_adapter(args.adapter)
    _check_pairing(model, adapter)
    out = _out_dir(args)
    tag_ids = (model.config.speech_offset - 2, model.config.speech_offset - 1)
    merged = ToyLM(model.config, merge(adapter, model.weights, tag_ids))
    merged_path = out / "merged_model.ut"
    merged.save(merged_path)
    _write_manifest(
        out, "adapter merge", {},
        {"model": args.model, "adapter": args.adapter},
        {"merged_model": merged_path}, {},
    )
    print(f"merged model {merged.fingerprint()} -> {merged_path}")
    return EXIT_OK


def _cmd_adapter_info(args) -> int:
    adapter = load_adapter(args.adapter)
    count, ratio = trainable_param_count(adapter)
    print(f"r={adapter.rank}")
    print(f"alpha={adapter.alpha:g}")
    print(f"dropout={adapter.dropout_rate:g}")
    print(f"scaling={adapter.scaling}")
    print(f"seed={adapter.seed}")
    print(f"layers={len(adapter.layers)}")
    print(f"trainable_params={count}")
    print(f"trainable_ratio={ratio:.6f}")
    print(f"base_fingerprint={adapter.base_spec.fingerprint}")
    return EXIT_OK


# -- parser ---------------------------------------------------------------------


def _add_config_flag(parser) -> None:
    parser.add_argument("--config", metavar="PATH",
                        help="key = value config file")


def build_parser() -> _Parser:
    parser = _Parser(prog="uttertune", description=__doc__.split("\n\n")[0])
    parser.add_argument(
        "--version", action="version", version=f"%(prog)s {__version__}"
    )
    sub = parser.add_subparsers(dest="group", required=True, metavar="command")

    notation = sub.add_parser("notation", help="annotation utilities")
    nsub = notation.add_subparsers(dest="action", required=True)
    for action, blurb in (
        ("parse", "annotation -> one structural line per phrase"),
        ("render", "structural lines -> annotation"),
        ("pitch", "annotation -> H/L string per phrase"),
        ("morae", "annotation -> mora segmentation"),
    ):
        p = nsub.add_parser(action, help=blurb)
        p.add_argument("text", nargs="?",
                       help="input; omit or '-' to read stdin")
        p.set_defaults(func=_cmd_notation)

    corpus = sub.add_parser("corpus", help="synthetic corpus")
    csub = corpus.add_subparsers(dest="action", required=True)
    build = csub.add_parser("build", help="sample sentences from the lexicon")
    _add_config_flag(build)
    build.add_argument("--sentences", type=int)
    build.add_argument("--tag-fraction", type=float, dest="tag_fraction")
    build.add_argument("--kana-fraction", type=float, dest="kana_fraction")
    build.add_argument("--seed", type=int)
    build.add_argument("--out", required=True, metavar="DIR")
    build.set_defaults(func=_cmd_corpus_build)

    vocab = sub.add_parser("vocab", help="subword vocabulary")
    vsub = vocab.add_subparsers(dest="action", required=True)
    vtrain = vsub.add_parser("train", help="learn BPE merges from a corpus")
    _add_config_flag(vtrain)
    vtrain.add_argument("--corpus", required=True, metavar="FILE")
    vtrain.add_argument("--vocab-size", type=int, dest="vocab_size")
    vtrain.add_argument("--seed", type=int)
    vtrain.add_argument("--out", required=True, metavar="DIR")
    vtrain.set_defaults(func=_cmd_vocab_train)

    train = sub.add_parser(
        "train", help="pretrain the base model, then train an adapter"
    )
    _add_config_flag(train)
    train.add_argument("--corpus", required=True, metavar="FILE",
                       help="pretraining corpus")
    train.add_argument("--adapter-corpus", required=True, metavar="FILE",
                       dest="adapter_corpus", help="adapter training corpus")
    train.add_argument("--vocab", required=True, metavar="FILE")
    train.add_argument("--seed", type=int, help="adapter init/training seed")
    train.add_argument("--steps", type=int, help="adapter training steps")
    train.add_argument("--rank", type=int)
    train.add_argument("--alpha", type=float)
    train.add_argument("--dropout", type=float)
    train.add_argument("--scaling", choices=SCALING_MODES)
    train.add_argument("--out", required=True, metavar="DIR")
    train.set_defaults(func=_cmd_train)

    gen = sub.add_parser("generate", help="text -> speech tokens")
    _add_config_flag(gen)
    gen.add_argument("--model", required=True, metavar="FILE")
    gen.add_argument("--vocab", required=True, metavar="FILE")
    gen.add_argument("--adapter", metavar="FILE")
    gen.add_argument("--text", help="input text; omit to read stdin")
    gen.add_argument("--decode", choices=("greedy", "sampled"))
    gen.add_argument("--max-new", type=int, dest="max_new")
    gen.add_argument("--temperature", type=float)
    gen.add_argument("--seed", type=int)
    gen.add_argument("--out", metavar="DIR")
    gen.set_defaults(func=_cmd_generate)

    ev = sub.add_parser("eval", help="held-out evaluation")
    _add_config_flag(ev)
    ev.add_argument("--model", required=True, metavar="FILE")
    ev.add_argument("--vocab", required=True, metavar="FILE")
    ev.add_argument("--adapter", metavar="FILE")
    ev.add_argument("--mode", choices=EVAL_MODES)
    ev.add_argument("--seed", type=int)
    ev.add_argument("--max-new", type=int, dest="max_new")
    ev.add_argument("--leakage", action="store_true",
                    help="also run the untagged-word leakage test")
    ev.add_argument("--out", required=True, metavar="DIR")
    ev.set_defaults(func=_cmd_eval)

    adapter = sub.add_parser("adapter", help="adapter management")
    asub = adapter.add_subparsers(dest="action", required=True)
    amerge = asub.add_parser("merge", help="bake an adapter into base weights")
    amerge.add_argument("--model", required=True, metavar="FILE")
    amerge.add_argument("--adapter", required=True, metavar="FILE")
    amerge.add_argument("--out", required=True, metavar="DIR")
    amerge.set_defaults(func=_cmd_adapter_merge)
    ainfo = asub.add_parser("info", help="print adapter hyperparameters")
    ainfo.add_argument("--adapter", required=True, metavar="FILE")
    ainfo.set_defaults(func=_cmd_adapter_info)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except _UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    except (NonFiniteLoss, SequenceTooLong) as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UtterTuneError, OSError, ValueError) as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
