"""``semqg`` command line: toy data, training, generation, filtering and evaluation."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path
from typing import Optional

import torch

from . import __version__
from .checkpoint import CheckpointError, file_digest
from .data import DataError, QAExample, load_jsonl, save_jsonl, tokenize_all
from .nn import NumericError

logger = logging.getLogger("semqg")

SEED_ENV = "SEMQG_SEED"
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
REWARD_CHOICES = ("none", "bleu4", "rougeL", "qpp", "qap", "qpp+qap", "wh")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        _emit_error("usage", message)
        sys.exit(EXIT_USAGE)


def _emit_error(kind: str, message: str) -> None:
    sys.stderr.write(json.dumps({"error": kind, "message": message}) + "\n")


# --------------------------------------------------------------------------
# helpers


def _write_json(path, obj) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _manifest(args, outputs: list, inputs: list) -> None:
    """RunManifest next to the first output."""
    if not outputs:
        return
    config = {k: v for k, v in vars(args).items() if k not in ("func",)}
    digests = {}
    for p in outputs:
        path = Path(p)
        if path.is_file():
            digests[str(p)] = file_digest(path)
        elif path.is_dir():
            for f in sorted(path.rglob("*")):
                if f.is_file() and not f.name.endswith("manifest.json"):
                    digests[str(f)] = file_digest(f)
    first = Path(outputs[0])
    target = first / "manifest.json" if first.is_dir() else first.with_name(first.name + ".manifest.json")
    _write_json(target, {
        "command": args.command, "config": config, "seed": args.seed,
        "inputs": [str(p) for p in inputs if p], "outputs": [str(p) for p in outputs],
        "digests": digests, "version": __version__,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    })


def _spec(args):
    from .toy import load_spec
    return load_spec(getattr(args, "toy_config", None))


def _tagger(args):
    return _spec(args).tagger()


def _load(path) -> list[QAExample]:
    if not Path(path).exists():
        raise DataError(f"{path}: no such file")
    return load_jsonl(path)


def _decode_config(args):
    from .decode import DecodeConfig
    return DecodeConfig(beam_size=args.beam, max_len=args.max_len, diversity=args.diverse,
                        block_ngram=args.block_ngram, min_len=1)


# --------------------------------------------------------------------------
# commands


def cmd_make_toy_data(args):
    from .toy import make_paraphrase_pairs, make_toy_corpus
    spec = _spec(args)
    spec = replace(spec, seed=args.seed)
    corpus = make_toy_corpus(spec, args.n_train, args.n_dev, args.n_unlabeled)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_jsonl(out / "train.jsonl", corpus.train)
    save_jsonl(out / "dev.jsonl", corpus.dev)
    save_jsonl(out / "unlabeled.jsonl", corpus.unlabeled)
    for name, n, salt in (("paraphrase_train.jsonl", args.n_paraphrase, 1), ("paraphrase_dev.jsonl",
                                                                             args.n_paraphrase // 2, 2)):
        pairs = make_paraphrase_pairs(spec, n, args.seed * 100 + salt)
        (out / name).write_text("".join(json.dumps({"q1": a, "q2": b, "label": y}) + "\n" for a, b, y in pairs))
    (out / "toy_language.cfg").write_text(spec.to_config_text())
    _manifest(args, [out], [args.toy_config])


def _model_config(args):
    from .qg import QGConfig
    return QGConfig(d_word=args.d_word, hidden=args.hidden, layers=args.layers, dropout=args.dropout,
                    copy=not args.no_copy)


def cmd_train_qg(args):
    from .qg import QGModel
    from .text import Vocabulary
    from .trainer import (MetricsLog, TrainConfig, metric_reward_fn, multi_reward_train, qap_reward_fn,
                          qpp_reward_fn, rl_train, train_teacher_forcing, wh_reward_fn)
    tagger = _tagger(args)
    train = tokenize_all(_load(args.train), tagger)
    dev = tokenize_all(_load(args.dev), tagger) if args.dev else []
    try:
        n, m = (int(x) for x in args.alt_rate.split(":"))
    except ValueError:
        raise UsageError(f"--alt-rate must look like n:m, got {args.alt_rate!r}") from None
    cfg = TrainConfig(batch_size=args.batch_size, epochs=args.epochs, patience=args.patience, tf_lr=args.lr,
                      rl_lr=args.rl_lr, gamma_qpp=args.gamma_qpp, gamma_qap=args.gamma_qap, gamma=args.gamma,
                      alt_n=n, alt_m=m, seed=args.seed, max_grad_norm=args.max_grad_norm)
    log = MetricsLog(args.log)
    if args.init:
        model = QGModel.load(args.init)
    else:
        vocab = Vocabulary.build([e.context_tokens for e in train] + [e.question_tokens for e in train])
        model = QGModel(_model_config(args), vocab, seed=args.seed)
    if args.reward == "none":
        result = train_teacher_forcing(model, train, dev, cfg, log)
    else:
        if not args.init:
            raise UsageError("RL fine-tuning needs --init with a teacher-forced checkpoint")
        frozen = []
        if args.reward in ("qpp", "qap", "qpp+qap"):
            from .rewards import QAModel, QPCModel
            rewards = {}
            if "qpp" in args.reward:
                if not args.qpc:
                    raise UsageError("--reward qpp needs --qpc")
                qpc = QPCModel.load(args.qpc)
                rewards["QPP"] = qpp_reward_fn(qpc)
                frozen.append(qpc)
            if "qap" in args.reward:
                if not args.qa:
                    raise UsageError("--reward qap needs --qa")
                qa = QAModel.load(args.qa)
                rewards["QAP"] = qap_reward_fn(qa)
                frozen.append(qa)
            if args.reward == "qpp":
                cfg = replace(cfg, alt_n=1, alt_m=0)
            elif args.reward == "qap":
                cfg = replace(cfg, alt_n=0, alt_m=1)
            result = multi_reward_train(model, train, dev, rewards, cfg, log, frozen)
        else:
            kind = {"bleu4": "BLEU4", "rougeL": "ROUGE-L", "wh": "WH"}[args.reward]
            fn = wh_reward_fn if kind == "WH" else metric_reward_fn(kind)
            result = rl_train(model, train, dev, {kind: fn}, {kind: cfg.gamma}, cfg, ((kind, 1),), log)
    result.model.save(args.out)
    outputs = [args.out] + ([args.log] if args.log else [])
    _manifest(args, outputs, [args.train, args.dev, args.init, args.qpc, args.qa])


def _load_pairs(path):
    from .text import tokenize
    pairs = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            r = json.loads(line)
            pairs.append(([t.text for t in tokenize(r["q1"])], [t.text for t in tokenize(r["q2"])], int(r["label"])))
    return pairs


def cmd_train_qpc(args):
    from .rewards import QPCConfig, qpc_accuracy, train_qpc
    from .text import Vocabulary
    from .trainer import MetricsLog
    train, dev = _load_pairs(args.train), _load_pairs(args.dev)
    vocab = Vocabulary.build([a for a, _, _ in train] + [b for _, b, _ in train] + [_spec(args).lexicon()])
    cfg = QPCConfig(lr=args.lr, batch_size=args.batch_size, epochs=args.epochs, patience=args.patience,
                    seed=args.seed)
    try:
        model = train_qpc(train, dev, cfg, vocab, MetricsLog(args.log))
    except ValueError as exc:
        raise DataError(str(exc)) from None
    model.save(args.out)
    if args.report:
        _write_json(args.report, {"dev_accuracy": qpc_accuracy(model, dev), "n_train": len(train)})
    _manifest(args, [args.out] + [p for p in (args.report, args.log) if p], [args.train, args.dev])


def _qa_config(args):
    from .rewards import QAConfig
    return QAConfig(lr=args.lr, batch_size=args.batch_size, epochs=args.epochs, patience=args.patience,
                    seed=args.seed)


def cmd_train_qa(args):
    from .rewards import train_qa
    from .trainer import MetricsLog
    tagger = _tagger(args)
    train = tokenize_all(_load(args.train), tagger)
    dev = tokenize_all(_load(args.dev), tagger) if args.dev else []
    try:
        model = train_qa(train, dev, _qa_config(args), log=MetricsLog(args.log))
    except ValueError as exc:
        raise DataError(str(exc)) from None
    model.save(args.out)
    _manifest(args, [args.out] + ([args.log] if args.log else []), [args.train, args.dev])


def cmd_generate(args):
    from .augment import generate_from_existing, generate_from_new, qap_score_all
    from .checkpoint import file_digest as fd
    from .qg import QGModel
    tagger = _tagger(args)
    model = QGModel.load(args.qg)
    records = _load(args.input)
    dcfg = _decode_config(args)
    gid = fd(args.qg)
    if args.source == "existing":
        synthetic = generate_from_existing(model, records, dcfg, gid, tagger)
    else:
        synthetic = generate_from_new(model, records, dcfg, args.top, gid, tagger)
    if args.qa:
        from .rewards import QAModel
        synthetic = qap_score_all(synthetic, QAModel.load(args.qa), tagger)
    save_jsonl(args.out, synthetic)
    _manifest(args, [args.out], [args.qg, args.input, args.qa])


def cmd_filter(args):
    from .augment import EPSILON_GRID, FilterConfig, filter_synthetic
    synthetic = _load(args.input)
    gold = _load(args.ground_truth) if args.ground_truth else []
    grid = EPSILON_GRID if args.sweep else [args.epsilon]
    out = Path(args.out)
    summaries = []
    outputs = []
    for eps in grid:
        res = filter_synthetic(synthetic, FilterConfig(eps, args.dedup), gold)
        summaries.append(res.summary)
        if args.sweep:
            out.mkdir(parents=True, exist_ok=True)
            path = out / f"kept_eps{eps:.1f}.jsonl"
        else:
            path = out
        save_jsonl(path, res.kept)
        outputs.append(path)
    report = Path(args.report) if args.report else (out / "filter_report.json" if args.sweep
                                                   else out.with_name(out.name + ".report.json"))
    _write_json(report, summaries if args.sweep else summaries[0])
    _manifest(args, [out if args.sweep else outputs[0], report], [args.input, args.ground_truth])


def cmd_train_qa_semi(args):
    from .augment import SemiDataset, build_semi_dataset
    from .evaluation import evaluate_qa
    from .rewards import train_qa
    from .trainer import MetricsLog
    tagger = _tagger(args)
    if args.dataset:
        ds = SemiDataset.load(args.dataset)
    else:
        ds = build_semi_dataset(_load(args.ground_truth), _load(args.synthetic) if args.synthetic else [])
    dev_raw = _load(args.dev) if args.dev else []
    audit = []
    cfg = _qa_config(args)
    model = train_qa(tokenize_all(ds.ground_truth, tagger), tokenize_all(dev_raw, tagger), cfg,
                     synthetic=tokenize_all(ds.synthetic, tagger), log=MetricsLog(args.log), batch_audit=audit)
    model.save(args.out)
    outputs = [args.out]
    if args.audit:
        _write_json(args.audit, mixing_audit(audit, len(ds.ground_truth), len(ds.synthetic), cfg.batch_size))
        outputs.append(args.audit)
    if args.report and dev_raw:
        _write_json(args.report, {**evaluate_qa(model, dev_raw, tagger).to_dict(), "train_size": ds.size})
        outputs.append(args.report)
    _manifest(args, outputs, [args.dataset, args.ground_truth, args.synthetic, args.dev])


def mixing_audit(batches, n_gt: int, n_syn: int, batch_size: int) -> dict:
    """Check every MixedBatch against the ceil/floor rule and per-epoch coverage."""
    half_up, half_down = -(-batch_size // 2), batch_size // 2
    ok = 0
    per_epoch: dict = {}
    for b in batches:
        if n_syn == 0:
            good = not b.synthetic and 0 < len(b.ground_truth) <= batch_size
        elif len(b.ground_truth) == half_up:
            good = len(b.synthetic) == half_down
        else:
            good = len(b.ground_truth) < half_up and len(b.synthetic) == len(b.ground_truth) - batch_size % 2
        ok += good
        per_epoch.setdefault(b.epoch, []).extend(b.ground_truth)
    coverage = all(sorted(v) == list(range(n_gt)) for v in per_epoch.values())
    return {"batches": len(batches), "compliant": ok, "fraction_compliant": ok / max(len(batches), 1),
            "epochs": len(per_epoch), "ground_truth_once_per_epoch": coverage}


def cmd_eval_qg(args):
    from .evaluation import evaluate_qg
    from .qg import QGModel
    tagger = _tagger(args)
    qpc = qa = None
    if args.qpc:
        from .rewards import QPCModel
        qpc = QPCModel.load(args.qpc)
    if args.qa:
        from .rewards import QAModel
        qa = QAModel.load(args.qa)
    data = _load(args.data)
    reports, hyps = evaluate_qg(QGModel.load(args.qg), data, _decode_config(args), qpc, qa, tagger)
    _write_json(args.out, {r.metric: {"value": r.value, "config": r.config} for r in reports})
    outputs = [args.out]
    if args.hypotheses:
        Path(args.hypotheses).write_text("".join(json.dumps({"id": ex.id, "question": " ".join(h)}) + "\n"
                                                 for ex, h in zip(data, hyps)))
        outputs.append(args.hypotheses)
    _manifest(args, outputs, [args.qg, args.data, args.qpc, args.qa])


def cmd_eval_qa(args):
    from .evaluation import evaluate_qa
    from .rewards import QAModel
    report = evaluate_qa(QAModel.load(args.qa), _load(args.data), _tagger(args), args.predictions)
    _write_json(args.out, report.to_dict())
    _manifest(args, [args.out] + ([args.predictions] if args.predictions else []), [args.qa, args.data])


def cmd_qa_based_eval(args):
    from .evaluation import qa_based_qg_eval, shuffle_questions
    from .qg import QGModel
    unlabeled = _load(args.unlabeled)
    dev = _load(args.dev)
    if args.qg:
        model = QGModel.load(args.qg)
    else:
        model = None
        if args.shuffle:
            unlabeled = shuffle_questions(unlabeled, args.seed)
    report = qa_based_qg_eval(model, unlabeled, dev, _qa_config(args),
                              replace(_decode_config(args), beam_size=args.beam), _tagger(args))
    _write_json(args.out, report.to_dict())
    _manifest(args, [args.out], [args.qg, args.unlabeled, args.dev])


def cmd_grad_check(args):
    from .checks import run_grad_checks
    res = run_grad_checks(range(args.seed, args.seed + args.n_seeds), args.tolerance)
    timing = res.pop("_seconds")
    if args.out:
        _write_json(args.out, res)
        _manifest(args, [args.out], [])
    for name, r in res.items():
        print(f"{'PASS' if r['passed'] else 'FAIL'} {name} max_rel_err={r['max_relative_error']:.2e}")
    print(f"{timing:.1f}s")
    if not all(r["passed"] for r in res.values()):
        raise NumericError("gradient check failed")


# --------------------------------------------------------------------------
# parser


def _default_seed() -> int:
    try:
        return int(os.environ.get(SEED_ENV, "0"))
    except ValueError:
        return 0


def _decode_options(beam: int) -> argparse.ArgumentParser:
    # a fresh parent per default: parents share action objects, so set_defaults would leak
    decode = argparse.ArgumentParser(add_help=False)
    decode.add_argument("--beam", type=int, default=beam)
    decode.add_argument("--max-len", type=int, default=20)
    decode.add_argument("--diverse", type=float, default=0.0, help="diversity penalty per sibling rank")
    decode.add_argument("--block-ngram", type=int, default=3, choices=(0, 2, 3))
    return decode


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=_default_seed(), help=f"random seed (default ${SEED_ENV} or 0)")
    common.add_argument("--threads", type=int, default=1, help="torch intra-op threads")
    common.add_argument("--config", help="JSON file of flag defaults (flags still win)")
    common.add_argument("--toy-config", help="toy language definition (tagger lexicons)")
    common.add_argument("-v", "--verbose", action="store_true")

    decode = _decode_options(beam=10)

    qa_opts = argparse.ArgumentParser(add_help=False)
    qa_opts.add_argument("--lr", type=float, default=0.002)
    qa_opts.add_argument("--batch-size", type=int, default=32)
    qa_opts.add_argument("--epochs", type=int, default=60)
    qa_opts.add_argument("--patience", type=int, default=10)

    p = _Parser(prog="semqg", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("make-toy-data", parents=[common], help="write the toy corpus and paraphrase pairs")
    s.add_argument("--out", required=True)
    s.add_argument("--n-train", type=int, default=200)
    s.add_argument("--n-dev", type=int, default=100)
    s.add_argument("--n-unlabeled", type=int, default=400)
    s.add_argument("--n-paraphrase", type=int, default=500)
    s.set_defaults(func=cmd_make_toy_data)

    s = sub.add_parser("train-qg", parents=[common], help="teacher forcing or RL fine-tuning of the QG model")
    s.add_argument("--train", required=True)
    s.add_argument("--dev")
    s.add_argument("--out", required=True)
    s.add_argument("--init", help="start from this QG checkpoint")
    s.add_argument("--reward", choices=REWARD_CHOICES, default="none")
    s.add_argument("--qpc")
    s.add_argument("--qa")
    s.add_argument("--gamma-qpp", type=float, default=0.99)
    s.add_argument("--gamma-qap", type=float, default=0.97)
    s.add_argument("--gamma", type=float, default=0.97, help="mixing weight for bleu4/rougeL/wh rewards")
    s.add_argument("--alt-rate", default="3:1", help="QPP:QAP batch alternation n:m")
    s.add_argument("--lr", type=float, default=0.001)
    s.add_argument("--rl-lr", type=float, default=0.00001)
    s.add_argument("--batch-size", type=int, default=32)
    s.add_argument("--epochs", type=int, default=200)
    s.add_argument("--patience", type=int, default=10)
    s.add_argument("--max-grad-norm", type=float)
    s.add_argument("--d-word", type=int, default=32)
    s.add_argument("--hidden", type=int, default=64)
    s.add_argument("--layers", type=int, default=2)
    s.add_argument("--dropout", type=float, default=0.3)
    s.add_argument("--no-copy", action="store_true")
    s.add_argument("--log", help="JSON-lines metrics log")
    s.set_defaults(func=cmd_train_qg)

    s = sub.add_parser("train-qpc", parents=[common], help="train the paraphrase classifier")
    s.add_argument("--train", required=True)
    s.add_argument("--dev", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--report")
    s.add_argument("--log")
    s.add_argument("--lr", type=float, default=0.0004)
    s.add_argument("--batch-size", type=int, default=64)
    s.add_argument("--epochs", type=int, default=50)
    s.add_argument("--patience", type=int, default=10)
    s.set_defaults(func=cmd_train_qpc)

    s = sub.add_parser("train-qa", parents=[common, qa_opts], help="train the span QA model")
    s.add_argument("--train", required=True)
    s.add_argument("--dev")
    s.add_argument("--out", required=True)
    s.add_argument("--log")
    s.set_defaults(func=cmd_train_qa)

    s = sub.add_parser("generate", parents=[common, decode], help="synthetic questions from a QG checkpoint")
    s.add_argument("--qg", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--source", choices=("existing", "new"), default="new")
    s.add_argument("--top", type=int, default=1, help="hypotheses kept per record for --source new")
    s.add_argument("--qa", help="score generated questions with this QA checkpoint (QAP)")
    s.set_defaults(func=cmd_generate)

    s = sub.add_parser("filter", parents=[common], help="QAP threshold filter and dedup")
    s.add_argument("--input", required=True)
    s.add_argument("--out", required=True, help="output file, or directory with --sweep")
    s.add_argument("--epsilon", type=float, default=0.0)
    s.add_argument("--sweep", action="store_true", help="epsilon in {0, .2, .4, .6, .8}")
    s.add_argument("--dedup", action="store_true")
    s.add_argument("--ground-truth", help="labeled records whose gold questions dedup removes")
    s.add_argument("--report")
    s.set_defaults(func=cmd_filter)

    s = sub.add_parser("train-qa-semi", parents=[common, qa_opts], help="QA on ground truth + synthetic (mixing)")
    s.add_argument("--dataset", help="directory written by build_semi_dataset")
    s.add_argument("--ground-truth")
    s.add_argument("--synthetic")
    s.add_argument("--dev")
    s.add_argument("--out", required=True)
    s.add_argument("--audit", help="write the mixing-batch audit here")
    s.add_argument("--report", help="write dev EM/F1 here")
    s.add_argument("--log")
    s.set_defaults(func=cmd_train_qa_semi)

    s = sub.add_parser("eval-qg", parents=[common, decode], help="BLEU4/ROUGE-L/Q-BLEU1/QPP/QAP report")
    s.add_argument("--qg", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--qpc")
    s.add_argument("--qa")
    s.add_argument("--hypotheses")
    s.set_defaults(func=cmd_eval_qg)

    s = sub.add_parser("eval-qa", parents=[common], help="EM/F1 of a QA checkpoint")
    s.add_argument("--qa", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--predictions")
    s.set_defaults(func=cmd_eval_qa)

    s = sub.add_parser("qa-based-eval", parents=[common, _decode_options(beam=1), qa_opts],
                       help="QA-based evaluation of a QG model")
    s.add_argument("--qg", help="omit to use the records' own questions")
    s.add_argument("--shuffle", action="store_true", help="with no --qg: shuffle questions across records")
    s.add_argument("--unlabeled", required=True)
    s.add_argument("--dev", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_qa_based_eval)

    s = sub.add_parser("grad-check", parents=[common], help="finite-difference checks of every block")
    s.add_argument("--n-seeds", type=int, default=10)
    s.add_argument("--tolerance", type=float, default=1e-4)
    s.add_argument("--out")
    s.set_defaults(func=cmd_grad_check)
    return p


def parse_args(argv: Optional[list] = None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            defaults = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            parser.error(f"--config: {exc}")
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sub._actions}
        unknown = set(defaults) - known
        if unknown:
            parser.error(f"--config: unknown key(s) {', '.join(sorted(unknown))}")
        sub.set_defaults(**defaults)
        args = parser.parse_args(argv)
    return args


def main(argv: Optional[list] = None) -> int:
    args = parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(max(1, args.threads))
    torch.manual_seed(args.seed)
    try:
        args.func(args)
    except UsageError as exc:
        _emit_error("usage", str(exc))
        return EXIT_USAGE
    except (DataError, CheckpointError, FileNotFoundError, json.JSONDecodeError, KeyError) as exc:
        _emit_error("data", str(exc))
        return EXIT_DATA
    except NumericError as exc:
        _emit_error("numeric", str(exc))
        return EXIT_NUMERIC
    except ValueError as exc:
        _emit_error("usage", str(exc))
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
