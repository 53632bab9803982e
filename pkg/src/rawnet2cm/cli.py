"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure (one ``error: <Class>: message``
line on stderr), 2 usage error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .baseline import BaselineModel, LfccConfig, score_baseline, train_baseline
from .checkpoint import load_checkpoint, save_checkpoint
from .data import SPLITS, SynthSpec, format_scores, read_corpus, read_scores, repartition, synth_corpus, \
    write_corpus, write_text_atomic
from .fusion import FusionModel, fit_fusion_records, fuse_records
from .metrics import TdcfConfig, per_attack_report
from .sinc import ScaleKind, build_filterbank, magnitude_response
from .train import TrainConfig, evaluate, train

log = logging.getLogger("rawnet2cm")


class UsageError(Exception):
    pass


def _require(*paths) -> None:
    for p in paths:
        if p is not None and not Path(p).exists():
            raise FileNotFoundError(f"{p} does not exist")


def _counts(text: str) -> tuple[int, int]:
    try:
        bona, spoof = (int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected 'N_BONA,N_SPOOF', got {text!r}") from None
    return bona, spoof


def _attacks(text: str) -> dict[str, str]:
    out = {}
    for item in text.split(","):
        if ":" not in item:
            raise argparse.ArgumentTypeError(f"expected ATTACK:KIND, got {item!r}")
        attack, kind = item.split(":", 1)
        out[attack.strip()] = kind.strip()
    return out


def cmd_synth_data(args) -> None:
    spec = SynthSpec(counts={"train": args.train, "dev": args.dev, "eval": args.eval},
                     attacks=args.attacks, seed=args.seed, duration=args.duration)
    corpus = synth_corpus(spec)
    write_corpus(corpus, args.out)
    print(f"wrote {len(corpus.utterances)} utterances to {args.out}")


def cmd_train(args) -> None:
    _require(args.data)
    corpus = read_corpus(args.data)
    items = corpus.split("train")
    if args.merge_dev is not None:
        items, _ = repartition(items, corpus.split("dev"), args.merge_dev, args.seed)
    cfg = TrainConfig(learning_rate=args.lr, epochs=args.epochs, batch_size=args.batch_size,
                      seed=args.seed, preset=args.preset, scale=args.scale,
                      validation_fraction=args.val_fraction, random_crop=args.random_crop)

    def report(rec):
        print(f"epoch {rec.epoch:3d}  train {rec.train_loss:.5f}  val {rec.val_loss:.5f}  "
              f"val EER {100 * rec.val_eer:.2f}%", flush=True)

    params, history = train(items, cfg, checkpoint_path=args.resume_from, resume=args.resume_from is not None,
                            on_epoch=report)
    save_checkpoint(args.out, params, train_config=asdict(cfg), meta={"log": history.to_json()})
    if args.log:
        write_text_atomic(args.log, history.to_tsv())
    print(f"saved best-validation model to {args.out}")


def cmd_score(args) -> None:
    _require(args.data, args.checkpoint)
    ck = load_checkpoint(args.checkpoint)
    utts = read_corpus(args.data, splits=[args.split]).utterances
    write_text_atomic(args.out, format_scores(evaluate(ck.params, utts)))
    print(f"wrote {len(utts)} scores to {args.out}")


def cmd_eval(args) -> None:
    _require(args.scores, args.tdcf)
    cfg = TdcfConfig.from_file(args.tdcf) if args.tdcf else TdcfConfig.default()
    report = per_attack_report(read_scores(args.scores), cfg, higher_is_bonafide=not args.lower_is_bonafide,
                               eer_method=args.eer_method)
    text = report.to_text()
    sys.stdout.write(text)
    if args.report:
        write_text_atomic(args.report, text)
    if args.report_tsv:
        write_text_atomic(args.report_tsv, report.to_tsv())


def cmd_baseline_train(args) -> None:
    _require(args.data)
    utts = read_corpus(args.data, splits=[args.split]).utterances
    lfcc = LfccConfig(n_filters=args.n_filters, n_ceps=args.n_ceps)
    model = train_baseline(utts, lfcc, args.components, args.iterations, args.seed)
    model.save(args.out)
    print(f"saved LFCC-GMM model to {args.out}")


def cmd_baseline_score(args) -> None:
    _require(args.data, args.model)
    model = BaselineModel.load(args.model)
    utts = read_corpus(args.data, splits=[args.split]).utterances
    write_text_atomic(args.out, format_scores(score_baseline(model, utts)))
    print(f"wrote {len(utts)} scores to {args.out}")


def cmd_fuse(args) -> None:
    _require(*(args.fit or []), *args.apply, args.model)
    if args.model:
        model = FusionModel.load(args.model)
    else:
        if not args.fit:
            raise UsageError("fuse needs --fit score files or an existing --model")
        model = fit_fusion_records([read_scores(p) for p in args.fit], kind=args.kind, c=args.C,
                                   epochs=args.epochs, seed=args.seed)
        if args.model_out:
            model.save(args.model_out)
    fused = fuse_records(model, [read_scores(p) for p in args.apply])
    write_text_atomic(args.out, format_scores(fused))
    print(f"wrote {len(fused)} fused scores to {args.out}")


def cmd_inspect_filters(args) -> None:
    bank = build_filterbank(args.scale, args.n_filters, args.kernel_len, f_min=args.f_min, f_max=args.f_max)
    mag = magnitude_response(bank.kernels, args.n_fft)
    freqs = np.fft.rfftfreq(args.n_fft, 1.0 / bank.sample_rate)
    pick = np.unique(np.linspace(0, freqs.size - 1, args.points).round().astype(int))
    db = 20 * np.log10(np.maximum(mag[:, pick], 1e-12))
    lines = [f"# scale={bank.scale.value} n_filters={bank.n_filters} kernel_len={bank.kernel_len} "
             f"sample_rate={bank.sample_rate}",
             "filter\tf_low_hz\tf_high_hz\t" + "\t".join(f"{f:.1f}" for f in freqs[pick])]
    for i, (lo, hi) in enumerate(bank.cutoffs):
        lines.append(f"{i}\t{lo:.6f}\t{hi:.6f}\t" + "\t".join(f"{v:.3f}" for v in db[i]))
    text = "\n".join(lines) + "\n"
    if args.out:
        write_text_atomic(args.out, text)
    else:
        sys.stdout.write(text)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rawnet2cm", description="Raw-waveform spoofing countermeasure toolkit")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth-data", help="generate the synthetic bona fide / spoof corpus")
    s.add_argument("--out", required=True, help="output corpus directory")
    s.add_argument("--seed", type=int, default=0, help="corpus seed")
    s.add_argument("--train", type=_counts, default=(100, 100), help="train counts N_BONA,N_SPOOF")
    s.add_argument("--dev", type=_counts, default=(50, 50), help="dev counts N_BONA,N_SPOOF")
    s.add_argument("--eval", type=_counts, default=(50, 50), help="eval counts N_BONA,N_SPOOF")
    s.add_argument("--attacks", type=_attacks, default={"A17": "click"},
                   help="comma list of ATTACK:KIND, KIND in click/phase/bandgap/hum")
    s.add_argument("--duration", type=float, default=1.0, help="utterance length in seconds")
    s.set_defaults(func=cmd_synth_data)

    s = sub.add_parser("train", help="train the countermeasure network")
    s.add_argument("--data", required=True, help="corpus directory")
    s.add_argument("--out", required=True, help="checkpoint to write")
    s.add_argument("--preset", choices=["paper", "desk"], default="desk", help="model size preset")
    s.add_argument("--scale", choices=[k.value for k in ScaleKind], default="mel",
                   help="sinc filter spacing: mel (S1), inverse_mel (S2), linear (S3)")
    s.add_argument("--epochs", type=int, default=100, help="training epochs")
    s.add_argument("--lr", type=float, default=1e-4, help="ADAM learning rate")
    s.add_argument("--batch-size", type=int, default=32, help="mini-batch size")
    s.add_argument("--seed", type=int, default=0, help="init / shuffle seed")
    s.add_argument("--val-fraction", type=float, default=0.1, help="held-out validation fraction")
    s.add_argument("--merge-dev", type=float, default=None, metavar="FRACTION",
                   help="add this fraction of the dev split to training")
    s.add_argument("--random-crop", action="store_true", help="random instead of start-aligned crops")
    s.add_argument("--resume-from", default=None, help="per-epoch checkpoint to write / resume from")
    s.add_argument("--log", default=None, help="write the training log as TSV")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("score", help="score a corpus split with a trained checkpoint")
    s.add_argument("--data", required=True, help="corpus directory")
    s.add_argument("--checkpoint", required=True, help="model checkpoint")
    s.add_argument("--split", choices=SPLITS, default="eval", help="split to score")
    s.add_argument("--out", required=True, help="score file to write")
    s.set_defaults(func=cmd_score)

    s = sub.add_parser("eval", help="pooled EER, pooled and per-attack min t-DCF")
    s.add_argument("--scores", required=True, help="4-column score file")
    s.add_argument("--tdcf", default=None, help="t-DCF config file (default: packaged config)")
    s.add_argument("--eer-method", choices=["rocch", "naive"], default="rocch", help="EER interpolation")
    s.add_argument("--lower-is-bonafide", action="store_true", help="scores use reversed polarity")
    s.add_argument("--report", default=None, help="also write the text report here")
    s.add_argument("--report-tsv", default=None, help="write a TSV report here")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("baseline-train", help="train the LFCC-GMM baseline")
    s.add_argument("--data", required=True, help="corpus directory")
    s.add_argument("--split", choices=SPLITS, default="train", help="training split")
    s.add_argument("--out", required=True, help="GMM model file to write")
    s.add_argument("--components", type=int, default=512, help="GMM components per class")
    s.add_argument("--iterations", type=int, default=20, help="EM iterations")
    s.add_argument("--n-filters", type=int, default=70, help="linear filterbank size")
    s.add_argument("--n-ceps", type=int, default=20, help="static cepstral coefficients")
    s.add_argument("--seed", type=int, default=0, help="k-means / EM seed")
    s.set_defaults(func=cmd_baseline_train)

    s = sub.add_parser("baseline-score", help="score a corpus split with the LFCC-GMM baseline")
    s.add_argument("--data", required=True, help="corpus directory")
    s.add_argument("--model", required=True, help="GMM model file")
    s.add_argument("--split", choices=SPLITS, default="eval", help="split to score")
    s.add_argument("--out", required=True, help="score file to write")
    s.set_defaults(func=cmd_baseline_score)

    s = sub.add_parser("fuse", help="fit and/or apply linear score fusion")
    s.add_argument("--fit", nargs="+", default=None, help="per-system score files to fit on")
    s.add_argument("--apply", nargs="+", required=True, help="per-system score files to fuse (same order)")
    s.add_argument("--model", default=None, help="existing fusion model (skips fitting)")
    s.add_argument("--model-out", default=None, help="save the fitted fusion model here")
    s.add_argument("--out", required=True, help="fused score file to write")
    s.add_argument("--kind", choices=["linear_svm", "logistic"], default="linear_svm", help="fusion loss")
    s.add_argument("--C", type=float, default=1.0, help="inverse regularization strength")
    s.add_argument("--epochs", type=int, default=200, help="subgradient epochs")
    s.add_argument("--seed", type=int, default=0, help="mini-batch order seed")
    s.set_defaults(func=cmd_fuse)

    s = sub.add_parser("inspect-filters", help="dump sinc cutoffs and sampled magnitude responses")
    s.add_argument("--scale", choices=[k.value for k in ScaleKind], default="mel", help="filter spacing")
    s.add_argument("--n-filters", type=int, default=128, help="number of filters")
    s.add_argument("--kernel-len", type=int, default=129, help="impulse response length")
    s.add_argument("--f-min", type=float, default=30.0, help="lowest band edge in Hz")
    s.add_argument("--f-max", type=float, default=None, help="highest band edge in Hz (default Nyquist - 100)")
    s.add_argument("--n-fft", type=int, default=4096, help="DFT size for responses")
    s.add_argument("--points", type=int, default=64, help="frequencies sampled per response")
    s.add_argument("--out", default=None, help="output file (default stdout)")
    s.set_defaults(func=cmd_inspect_filters)
    return p


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: UsageError: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - one-line machine-readable failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
