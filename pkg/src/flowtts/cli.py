"""Command-line surface: data preparation, training, preference optimization,
synthesis, the pair-count sweep, evaluation, and the annotation service."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    import yaml
    with open(path) as f:
        return yaml.safe_load(f) or {}


def _cfg_get(cfg: dict, key: str, flag_value, default):
    # precedence: explicit flag > config file > default
    if flag_value is not None:
        return flag_value
    return cfg.get(key, default)


def cmd_prepare_data(args) -> int:
    from . import data
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfgfile = _load_config(args.config)
    if args.synthetic:
        corpus = data.synthetic_corpus(
            n_utterances=_cfg_get(cfgfile, "n_utterances", args.count, 8),
            n_speakers=cfgfile.get("n_speakers", 2),
            seed=args.seed,
            duration_scale=cfgfile.get("duration_scale", 1.0))
        data.save_corpus(corpus, out)
        print(f"wrote synthetic corpus ({len(corpus.utterances)} utterances) to {out}")
        return 0
    if not args.manifest:
        print("either --synthetic or --manifest is required", file=sys.stderr)
        return 2
    manifest = data.Manifest.load(args.manifest)
    mel_cfg = data.MelConfig(**cfgfile.get("mel", {}))
    symbols = sorted({p for r in manifest.records for p in r.phonemes})
    vocab = data.PhonemeVocab(symbols)
    base = Path(args.manifest).parent
    raw = []
    for r in manifest.records:
        wav_path = base / r.audio if not Path(r.audio).exists() else Path(r.audio)
        wave, rate = data.read_wav(wav_path)
        mel = data.compute_mel(wave, mel_cfg, sample_rate=rate)
        raw.append((r, mel))
    stats = data.compute_mel_stats([m for _, m in raw])
    utts, rejected = [], []
    for r, mel in raw:
        mel = ((mel - stats.mean) / stats.std).astype(np.float32)
        u = data.Utterance(id=r.id, speaker=r.speaker, text=r.text,
                           phonemes=vocab.encode(r.phonemes), durations=r.durations,
                           mel=mel)
        res = data.validate_and_filter(u, vocab)
        if res.accepted:
            utts.append(u)
        else:
            rejected.append((r.id, res.reason))
    corpus = data.SyntheticCorpus(vocab=vocab, utterances=utts, stats=stats,
                                  base_durations={})
    data.save_corpus(corpus, out)
    print(f"accepted {len(utts)}, rejected {len(rejected)}")
    for rid, reason in rejected:
        print(f"  rejected {rid}: {reason}")
    return 0


def cmd_train_acoustic(args) -> int:
    from . import acoustic, data
    corpus = data.load_corpus(args.corpus)
    cfgfile = _load_config(args.config)
    cfg = acoustic.AcousticConfig(vocab_size=len(corpus.vocab),
                                  **cfgfile.get("acoustic", {}))
    system, ema, losses = acoustic.train_acoustic(
        corpus, cfg, steps=args.steps, seed=args.seed, log_every=args.log_every)
    acoustic.save_checkpoint(args.out, system, cfg, ema=ema, step=args.steps)
    print(f"final loss {losses[-1]:.4f}; checkpoint at {args.out}")
    return 0


def cmd_train_duration(args) -> int:
    from . import acoustic, data, duration
    corpus = data.load_corpus(args.corpus)
    cfgfile = _load_config(args.config)
    cfg = duration.DurModelConfig.desk(vocab_size=len(corpus.vocab))
    for k, v in cfgfile.get("duration", {}).items():
        setattr(cfg, k, v)
    model, losses = duration.train_duration(corpus, cfg, steps=args.steps,
                                            seed=args.seed, log_every=args.log_every)
    acoustic.save_checkpoint(args.out, model, cfg, step=args.steps)
    print(f"final loss {losses[-1]:.4f}; checkpoint at {args.out}")
    return 0


def cmd_generate_pairs(args) -> int:
    from . import data, dpo, duration
    corpus = data.load_corpus(args.corpus)
    model, _ = duration.load_duration_model(args.duration_ckpt)
    rng = np.random.default_rng(args.seed)
    pairs = dpo.generate_pairs(corpus.utterances[:args.count or None], model, rng)
    out = Path(args.out)
    dpo.save_pairs(pairs, out, out.parent / (out.stem + "_refmels"))
    print(f"wrote {len(pairs)} pairs to {out}")
    return 0


def cmd_dpo(args) -> int:
    from . import acoustic, dpo, duration
    policy, ckpt = duration.load_duration_model(args.duration_ckpt)
    ref, _ = duration.load_duration_model(args.duration_ckpt)
    pairs = dpo.load_pairs(args.pairs)
    if args.count:
        pairs = pairs[:args.count]
    cfg = dpo.DPOConfig(beta=args.beta, lr=args.lr, steps=args.steps, seed=args.seed)
    policy, info = dpo.dpo_train(policy, ref, pairs, cfg)
    dcfg = duration.DurModelConfig(**ckpt["config"])
    acoustic.save_checkpoint(args.out, policy, dcfg, step=cfg.steps,
                             extra={"dpo": {"beta": cfg.beta, "pairs": len(pairs)}})
    print(f"DPO done on {len(pairs)} pairs; final loss "
          f"{info['loss_history'][-1]:.4f}; checkpoint at {args.out}")
    return 0


def cmd_synth(args) -> int:
    from . import acoustic, data, duration, pipeline
    system, _ = acoustic.load_acoustic_system(args.acoustic_ckpt, use_ema=not args.no_ema)
    corpus = data.load_corpus(args.corpus)
    rng = np.random.default_rng(args.seed)

    if args.phonemes:
        target = [corpus.vocab.id(s) for s in args.phonemes.split(",")]
    else:
        target = corpus.utterances[0].phonemes
    prompt_u = corpus.utterances[0]
    clip = data.slice_reference_clip(prompt_u.mel, 3.0, rng)
    prompt = duration.DurationPrompt(list(prompt_u.phonemes),
                                     list(prompt_u.durations), clip)

    durations = None
    if args.durations:
        durations = [int(x) for x in args.durations.split(",")]
    dur_model = None
    if durations is None:
        if not args.duration_ckpt:
            print("need --durations or --duration-ckpt", file=sys.stderr)
            return 2
        dur_model, _ = duration.load_duration_model(args.duration_ckpt)

    req = pipeline.SynthesisRequest(
        target_phonemes=target, prompt=prompt, speaker_ref_mel=clip,
        explicit_durations=durations, seed=args.seed,
        cfg=acoustic.CFGParams(alpha=args.alpha),
        solver=acoustic.SolverConfig(steps=args.ode_steps))
    vocoder = None
    if args.wav:
        mel_cfg = data.MelConfig(stats=corpus.stats)
        vocoder = pipeline.griffin_lim_vocoder(mel_cfg)
    mel, durs, wav = pipeline.synthesize(system, dur_model, req, vocoder=vocoder)
    data.save_mel(mel, args.out)
    print(f"wrote mel [{mel.shape[0]} x {mel.shape[1]}] to {args.out}; "
          f"durations {durs}")
    if wav is not None:
        data.write_wav(args.wav, wav, 16000)
        print(f"wrote waveform to {args.wav}")
    return 0


def cmd_sweep(args) -> int:
    from . import data, dpo, duration, pipeline
    corpus = data.load_corpus(args.corpus)
    ref, _ = duration.load_duration_model(args.duration_ckpt)
    pairs = dpo.load_pairs(args.pairs)
    counts = [int(c) for c in args.counts.split(",")]
    split = max(1, len(corpus.utterances) // 5)
    test, train = corpus.utterances[:split], corpus.utterances[split:]
    cfg = dpo.DPOConfig(beta=args.beta, lr=args.lr, steps=args.steps, seed=args.seed)
    report = pipeline.style_transfer_sweep(
        counts, pairs, ref, test, train, cfg,
        seeds=tuple(range(args.seeds)), csv_path=args.out,
        batch_size=args.batch_size, steps_per_pair=args.steps_per_pair)
    pipeline.write_summary_json(report, Path(args.out).with_suffix(".json"))
    for row in report:
        print(row)
    return 0


def cmd_eval(args) -> int:
    from .pipeline import eval_duration_metrics
    pred = {json.loads(l)["id"]: json.loads(l)["durations"]
            for l in Path(args.pred).read_text().splitlines() if l.strip()}
    ref = {json.loads(l)["id"]: json.loads(l)["durations"]
           for l in Path(args.ref).read_text().splitlines() if l.strip()}
    common = sorted(set(pred) & set(ref))
    if not common:
        print("no overlapping ids", file=sys.stderr)
        return 1
    flat_p = [d for i in common for d in pred[i]]
    flat_r = [d for i in common for d in ref[i]]
    metrics = eval_duration_metrics(flat_p, flat_r)
    print(json.dumps(metrics, indent=2))
    if args.out:
        Path(args.out).write_text(json.dumps(metrics))
    return 0


def cmd_annotate_serve(args) -> int:
    import uvicorn
    from .annotation import AnnotationStore, create_app
    store = AnnotationStore(args.db, seed=args.seed)
    app = create_app(store, media_dir=args.media or None)
    uvicorn.run(app, host=args.host, port=args.port)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="flowtts")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--config", default=None)
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", required=out_required, default=None)

    sp = sub.add_parser("prepare-data", help="build a corpus from a manifest or synthesize one")
    common(sp)
    sp.add_argument("--manifest", default=None)
    sp.add_argument("--synthetic", action="store_true")
    sp.add_argument("--count", type=int, default=None)
    sp.set_defaults(fn=cmd_prepare_data)

    sp = sub.add_parser("train-acoustic")
    common(sp)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--steps", type=int, default=2000)
    sp.add_argument("--log-every", type=int, default=0)
    sp.set_defaults(fn=cmd_train_acoustic)

    sp = sub.add_parser("train-duration")
    common(sp)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--steps", type=int, default=2000)
    sp.add_argument("--log-every", type=int, default=0)
    sp.set_defaults(fn=cmd_train_duration)

    sp = sub.add_parser("generate-pairs")
    common(sp)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--duration-ckpt", required=True)
    sp.add_argument("--count", type=int, default=0)
    sp.set_defaults(fn=cmd_generate_pairs)

    sp = sub.add_parser("dpo")
    common(sp)
    sp.add_argument("--duration-ckpt", required=True)
    sp.add_argument("--pairs", required=True)
    sp.add_argument("--count", type=int, default=0)
    sp.add_argument("--beta", type=float, default=0.1)
    sp.add_argument("--lr", type=float, default=1e-4)
    sp.add_argument("--steps", type=int, default=200)
    sp.set_defaults(fn=cmd_dpo)

    sp = sub.add_parser("synth")
    common(sp)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--acoustic-ckpt", required=True)
    sp.add_argument("--duration-ckpt", default=None)
    sp.add_argument("--phonemes", default=None, help="comma-separated symbols")
    sp.add_argument("--durations", default=None, help="comma-separated frame counts")
    sp.add_argument("--alpha", type=float, default=2.0)
    sp.add_argument("--ode-steps", type=int, default=32)
    sp.add_argument("--no-ema", action="store_true")
    sp.add_argument("--wav", default=None)
    sp.set_defaults(fn=cmd_synth)

    sp = sub.add_parser("sweep")
    common(sp)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--duration-ckpt", required=True)
    sp.add_argument("--pairs", required=True)
    sp.add_argument("--counts", default="0,10,50,100")
    sp.add_argument("--beta", type=float, default=0.1)
    sp.add_argument("--lr", type=float, default=1e-4)
    sp.add_argument("--steps", type=int, default=200)
    sp.add_argument("--steps-per-pair", type=float, default=None)
    sp.add_argument("--batch-size", type=int, default=8)
    sp.add_argument("--seeds", type=int, default=3)
    sp.set_defaults(fn=cmd_sweep)

    sp = sub.add_parser("eval")
    common(sp, out_required=False)
    sp.add_argument("--pred", required=True)
    sp.add_argument("--ref", required=True)
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("annotate-serve")
    sp.add_argument("--config", default=None)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--db", required=True)
    sp.add_argument("--media", default=None)
    sp.add_argument("--host", default="127.0.0.1")
    sp.add_argument("--port", type=int, default=8765)
    sp.set_defaults(fn=cmd_annotate_serve)

    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if e.code is not None else 0
    try:
        return args.fn(args)
    except Exception as e:  # runtime failure -> exit 1
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
