"""``rdino`` command line: train, resume, embed, trials, score, metrics, det, synth."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .evaluation import (
    det_points,
    eer,
    extract_embedding,
    join_scores,
    load_embeddings,
    make_trials,
    min_dcf,
    read_scores,
    read_trials,
    save_embeddings,
    score_trials,
    write_scores,
    write_trials,
)
from .features import read_wav, synth_corpus, write_wav
from .trainer import load_checkpoint, load_config, train


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    res = train(cfg, out_dir=args.out, progress=None if args.quiet else print)
    print(f"wrote {res.checkpoint}")
    return 0


def cmd_resume(args) -> int:
    ckpt = Path(args.ckpt)
    _, _, cfg = load_checkpoint(ckpt)
    out = Path(args.out) if args.out else ckpt.parent
    res = train(cfg, out_dir=out, resume_from=ckpt, progress=None if args.quiet else print)
    print(f"wrote {res.checkpoint}")
    return 0


def cmd_embed(args) -> int:
    pair, _, _ = load_checkpoint(args.ckpt)
    files = sorted(Path(args.audio_dir).glob("*.wav"))
    if not files:
        print(f"no .wav files in {args.audio_dir}", file=sys.stderr)
        return 1
    save_embeddings({f.stem: extract_embedding(read_wav(f), pair) for f in files}, args.out)
    print(f"wrote {len(files)} embeddings to {args.out}")
    return 0


def cmd_trials(args) -> int:
    # speaker id is the file stem up to the first '-', as written by ``synth``
    stems = sorted(p.stem for p in Path(args.audio_dir).glob("*.wav"))
    trials = make_trials({s: s.split("-")[0] for s in stems}, args.targets, args.nontargets, args.seed)
    write_trials(trials, args.out)
    print(f"wrote {len(trials)} trials to {args.out}")
    return 0


def cmd_score(args) -> int:
    trials = read_trials(args.trials)
    ss = score_trials(trials, load_embeddings(args.emb))
    write_scores(trials, ss, args.out)
    return 0


def cmd_metrics(args) -> int:
    ss = join_scores(read_trials(args.trials), read_scores(args.scores))
    print(f"EER(%) {100 * eer(ss):.4f}  minDCF(p={args.p_target:g}) {min_dcf(ss, args.p_target):.4f}")
    return 0


def cmd_det(args) -> int:
    ss = join_scores(read_trials(args.trials), read_scores(args.scores))
    with open(args.out, "w") as fh:
        fh.write("far\tfrr\n")
        for far, frr in det_points(ss):
            fh.write(f"{far:.6f}\t{frr:.6f}\n")
    return 0


def cmd_synth(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, (spk, wave) in enumerate(synth_corpus(args.speakers, args.utts, args.seconds, args.seed)):
        write_wav(out / f"spk{spk:03d}-utt{i:05d}.wav", wave)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rdino", description="Regularized DINO speaker embeddings")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("resume", help="continue training from an epoch checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", help="output directory (default: the checkpoint's directory)")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_resume)

    p = sub.add_parser("embed", help="extract teacher embeddings for every .wav in a directory")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--audio-dir", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("trials", help="draw a seeded target/nontarget trial list over a WAV directory")
    p.add_argument("--audio-dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--targets", type=int, default=200)
    p.add_argument("--nontargets", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_trials)

    p = sub.add_parser("score", help="cosine-score a trial list")
    p.add_argument("--emb", required=True)
    p.add_argument("--trials", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("metrics", help="print EER and minDCF")
    p.add_argument("--scores", required=True)
    p.add_argument("--trials", required=True)
    p.add_argument("--p-target", type=float, default=0.05)
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("det", help="write DET operating points as TSV")
    p.add_argument("--scores", required=True)
    p.add_argument("--trials", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_det)

    p = sub.add_parser("synth", help="write a synthetic speaker corpus as 16-bit WAVs")
    p.add_argument("--out", required=True)
    p.add_argument("--speakers", type=int, default=10)
    p.add_argument("--utts", type=int, default=10)
    p.add_argument("--seconds", type=float, default=4.0)
    p.add_argument("--seed", type=int, default=7)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"rdino {args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
