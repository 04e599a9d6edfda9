"""Command-line entry point: ``ms2s <subcommand> ...``.

Exit codes: 0 success, 1 a verification failed, 2 bad usage or input.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import __version__
from . import config as config_mod
from .errors import MS2SError
from .numcore import set_default_dtype

log = logging.getLogger("ms2s")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageExit(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse exits 2 itself; keep the message style uniform
        self.print_usage(sys.stderr)
        raise UsageExit(f"{self.prog}: {message}")


def _pmap(fn: Callable, items: Sequence, jobs: int) -> list:
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=min(jobs, len(items))) as ex:
        return list(ex.map(fn, items))


def _settings(args, **flags) -> dict:
    cfg = config_mod.resolve(args.config, {"seed": args.seed, "jobs": args.jobs, "dtype": args.dtype, **flags})
    set_default_dtype(np.float32 if cfg["dtype"] == "float32" else np.float64)
    return cfg


# -- subcommands ------------------------------------------------------------------


def _features_of(path_and_mels):
    from .features import read_wav
    from .pipeline import recording_features

    path, n_mels = path_and_mels
    return recording_features(read_wav(path).samples, n_mels)


def cmd_extract_features(args) -> int:
    from .features import save_features

    cfg = _settings(args, n_mels=args.n_mels)
    wavs = [Path(args.wav)] if args.wav else sorted(Path(args.wav_dir).glob("*.wav"))
    if not wavs:
        raise MS2SError(f"no WAV files found in {args.wav_dir}")
    out = Path(args.out_dir)
    fms = _pmap(_features_of, [(w, cfg["n_mels"]) for w in wavs], cfg["jobs"])
    for w, fm in zip(wavs, fms):
        save_features(out / f"{w.stem}.feat", fm)
        print(f"{w.name}: {fm.T} frames x {fm.F} -> {out / (w.stem + '.feat')}")
    config_mod.write_sidecar(out, cfg, "extract-features")
    return EXIT_OK


def cmd_init_diar(args) -> int:
    from .features import read_wav
    from .pipeline import Embedders, clustering_init, discover_recordings, recording_features
    from .scoring import mask_to_segments, write_rttm

    cfg = _settings(args, n_mels=args.n_mels)
    emb = Embedders.create(cfg["n_mels"], seed=cfg["seed"])
    segs = []
    recs = discover_recordings(args.wav_dir, 1)
    if not recs:
        raise MS2SError(f"no WAV files found in {args.wav_dir}")
    for rec, paths in recs.items():
        fm = recording_features(read_wav(paths[0]).samples, cfg["n_mels"])
        S = clustering_init(fm, emb, args.n_speakers, args.max_speakers, cfg["embed_window"], cfg["embed_hop"], cfg["vad_db"], cfg["seed"])
        segs += mask_to_segments(S, fm.frame_hop_s, rec)
        print(f"{rec}: {S.shape[0]} speakers")
    write_rttm(args.out, segs)
    config_mod.write_sidecar(Path(args.out).parent, cfg, "init-diar")
    return EXIT_OK


def cmd_build_memory(args) -> int:
    from .initialization import MemoryBank, build_memory, read_embeddings_csv
    from .pipeline import Embedders, discover_recordings, memory_banks

    cfg = _settings(args, memory_k=args.k, n_mels=args.n_mels)
    out = Path(args.out_dir)
    if args.embeddings_csv:
        pool = [e for p in args.embeddings_csv for e in read_embeddings_csv(p)]
        bank = build_memory(pool, cfg["memory_k"], "xvector", cfg["seed"])
        bank.save(out / "xvector.mem")
        print(f"xvector bank: {bank.K} x {bank.dim} from {len(pool)} imported embeddings")
    else:
        recs = discover_recordings(args.wav_dir, 1)
        if not recs:
            raise MS2SError(f"no WAV files found in {args.wav_dir}")
        fms = _pmap(_features_of, [(p[0], cfg["n_mels"]) for p in recs.values()], cfg["jobs"])
        emb = Embedders.create(cfg["n_mels"], seed=cfg["seed"])
        mx, mi = memory_banks(fms, emb, cfg["memory_k"], cfg["embed_window"], cfg["seed"])
        MemoryBank(mx, "xvector").save(out / "xvector.mem")
        MemoryBank(mi, "ivector").save(out / "ivector.mem")
        print(f"banks: xvector {mx.shape}, ivector {mi.shape}")
    config_mod.write_sidecar(out, cfg, "build-memory")
    return EXIT_OK


def _load_corpus(corpus_dir, n_mels: int, jobs: int, max_channels=None):
    from .pipeline import discover_recordings, labels_from_segments
    from .scoring import by_recording, parse_rttm

    corpus = Path(corpus_dir)
    ref_path = corpus / "reference.rttm"
    if not ref_path.exists():
        raise MS2SError(f"{ref_path} not found")
    ref = by_recording(parse_rttm(ref_path))
    recs = discover_recordings(corpus, max_channels)
    missing = sorted(set(recs) - set(ref))
    if missing:
        raise MS2SError(f"recordings without reference: {missing}")
    jobs_in = [(p, n_mels) for paths in recs.values() for p in paths]
    fms = iter(_pmap(_features_of, jobs_in, jobs))
    out = []
    for rec, paths in recs.items():
        chans = [next(fms) for _ in paths]
        Y, names = labels_from_segments(ref[rec], chans[0].T, chans[0].frame_hop_s)
        out.append((rec, chans, Y, names))
    return out, ref


def cmd_train(args) -> int:
    from .model import NSDModel
    from .pipeline import Embedders, prepare_training, save_bundle
    from .plots import training_curves
    from .training import TrainConfig, train

    cfg = _settings(
        args, epochs=args.epochs, lr=args.lr, batch_size=args.batch_size, preset=args.preset, n_max=args.n_max,
        mixup=args.mixup or None, memory_k=args.memory_k, dropout=args.dropout,
    )
    out = Path(args.out_dir)
    mcfg = config_mod.model_config(cfg)
    corpus, _ = _load_corpus(args.corpus, cfg["n_mels"], cfg["jobs"])
    emb = Embedders.create(cfg["n_mels"], mcfg.xvec_dim, mcfg.ivec_dim, cfg["seed"])
    examples, mem_x, mem_i = prepare_training(
        [(r, c, Y) for r, c, Y, _ in corpus], emb, mcfg.t_out, mcfg.n_max, cfg["mask_flip"], cfg["memory_k"], cfg["seed"], cfg["embed_window"]
    )
    print(f"{len(corpus)} recordings, {len(examples)} chunks of {mcfg.t_out} frames")
    model = NSDModel(mcfg)
    extra = {"memory": {"xvector": "xvector.mem", "ivector": "ivector.mem"}, "n_mels": cfg["n_mels"], "embed_seed": cfg["seed"]}
    save_bundle(out / "model.json", model, mem_x, mem_i, extra)  # banks first so epoch checkpoints resolve
    tcfg = TrainConfig(cfg["epochs"], cfg["batch_size"], cfg["lr"], cfg["seed"], cfg["mixup"], cfg["mixup_alpha"], cfg["threshold"])
    history = train(model, examples, mem_x, mem_i, tcfg, out, on_epoch=lambda m: print(f"epoch {m.epoch}: loss {m.loss:.4f} train DER {100 * m.train_der:.2f}%", flush=True), checkpoint_extra=extra)
    save_bundle(out / "model.json", model, mem_x, mem_i, {**extra, "epoch": len(history)})
    training_curves(history, out / "training.png")
    config_mod.write_sidecar(out, cfg, "train")
    return EXIT_OK


_WORKER: dict = {}


def _infer_init(model_path, dtype):
    from .pipeline import load_bundle

    set_default_dtype(np.float32 if dtype == "float32" else np.float64)
    _WORKER["bundle"] = load_bundle(model_path)


def _infer_one(job):
    from .features import read_wav
    from .inference import iterate
    from .pipeline import Embedders, clustering_init, labels_from_segments, profiles, recording_features

    rec, paths, init_segs, cfg, n_speakers = job
    model, mem_x, mem_i, manifest = _WORKER["bundle"]
    n_mels = manifest.get("n_mels", model.cfg.n_feats)
    emb = Embedders.create(n_mels, model.cfg.xvec_dim, model.cfg.ivec_dim, manifest.get("embed_seed", 0))
    chans = [recording_features(read_wav(p).samples, n_mels) for p in paths]
    if init_segs:
        S, _ = labels_from_segments(init_segs, chans[0].T, chans[0].frame_hop_s)
    else:
        S = clustering_init(chans[0], emb, n_speakers, model.cfg.n_max, cfg["embed_window"], cfg["embed_hop"], cfg["vad_db"], cfg["seed"])
    post = dict(threshold=cfg["threshold"], median_win=cfg["median_win"], min_seg_s=cfg["min_seg"], min_gap_s=cfg["min_gap"])
    res = iterate(
        model, chans, S[: model.cfg.n_max], lambda fm, m: profiles(fm, m, emb), mem_x, mem_i, cfg["iters"], rec,
        overlap=cfg["overlap"], post=post,
    )
    return rec, res.posteriors, res.segments


def cmd_infer(args) -> int:
    from .pipeline import discover_recordings
    from .scoring import by_recording, parse_rttm, write_rttm
    from .storage import write_posteriors

    cfg = _settings(args, iters=args.iters, threshold=args.threshold, overlap=args.overlap)
    if not Path(args.model).exists():
        raise MS2SError(f"checkpoint {args.model} not found")
    recs = discover_recordings(args.wav_dir, args.channels)
    if not recs:
        raise MS2SError(f"no WAV files found in {args.wav_dir}")
    init = by_recording(parse_rttm(args.init_rttm)) if args.init_rttm else {}
    jobs = [(rec, paths, init.get(rec), cfg, args.n_speakers) for rec, paths in recs.items()]
    if cfg["jobs"] > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(min(cfg["jobs"], len(jobs)), initializer=_infer_init, initargs=(args.model, cfg["dtype"])) as ex:
            results = list(ex.map(_infer_one, jobs))
    else:
        _infer_init(args.model, cfg["dtype"])
        results = [_infer_one(j) for j in jobs]
    segs = [s for _, _, ss in results for s in ss]
    write_rttm(args.out, segs)
    if args.posteriors_dir:
        for rec, y, _ in results:
            write_posteriors(Path(args.posteriors_dir) / f"{rec}.post", y, 10)
    print(f"{len(results)} recordings, {len(segs)} segments -> {args.out}")
    config_mod.write_sidecar(Path(args.out).parent, cfg, "infer")
    return EXIT_OK


def cmd_score(args) -> int:
    from .plots import der_bars
    from .scoring import by_recording, macro, parse_rttm, report_csv, report_table, score_recordings
    from .storage import write_text_atomic

    cfg = _settings(args, collar=args.collar)
    ref = by_recording(parse_rttm(args.ref))
    hyp = by_recording(parse_rttm(args.hyp))
    reports = score_recordings(ref, hyp, cfg["collar"], not args.no_overlap)
    print(report_table(reports))
    if args.out_csv:
        write_text_atomic(args.out_csv, report_csv(reports))
        der_bars(reports, Path(args.out_csv).with_suffix(".png"))
    m = macro(reports)
    print(f"macro DER {100 * m['der']:.2f}%  JER {100 * m['jer']:.2f}%")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .model import ModelConfig
    from .numcore import check_gradients, ops
    from .training import gradcheck_problem

    set_default_dtype(np.float64)
    seed = args.seed or 0
    cfg = ModelConfig.tiny(seed=seed) if args.preset == "tiny" else ModelConfig.desk(n_max=2, t_out=40, dropout=0.0, seed=seed)
    model, loss = gradcheck_problem(cfg, T=cfg.t_out, seed=seed)
    params = model.parameters()
    if args.list:
        for name, p in params.items():
            print(f"{name}\t{tuple(p.shape)}")
        return EXIT_OK
    if args.inject_fault == "gate-sign":
        ops._GATE_GRAD_SIGN = -1.0
    try:
        results = check_gradients(loss, params, step=1e-5, max_coords=args.coords)
    finally:
        ops._GATE_GRAD_SIGN = 1.0
    worst = 0.0
    for r in results:
        ok = r.passed(args.tol)
        worst = max(worst, r.rel_err if r.abs_err > r.noise_floor else 0.0)
        print(f"{'ok  ' if ok else 'FAIL'} {r.name:<45} rel_err {r.rel_err:.3e} abs_err {r.abs_err:.2e}")
    failed = [r for r in results if not r.passed(args.tol)]
    print(f"{len(results) - len(failed)}/{len(results)} groups pass; max rel_err {worst:.3e} (tol {args.tol:g})")
    return EXIT_FAIL if failed else EXIT_OK


def cmd_bench(args) -> int:
    from . import bench
    from .plots import bench_scaling
    from .storage import write_text_atomic

    cfg = _settings(args)
    Ts = [int(t) for t in args.T.split(",")]
    mcfg = config_mod.model_config({**cfg, "n_max": max(cfg["n_max"], args.N), "dropout": 0.0})
    rows = bench.run(Ts, args.N, mcfg, cfg["seed"], args.repeats)
    text = bench.to_csv(rows)
    if args.out:
        write_text_atomic(args.out, text)
        bench_scaling(rows, Path(args.out).with_suffix(".png"))
    print(text, end="")
    if len(Ts) >= 2:
        T, ms, peak = bench.stage(rows, "decoder")
        print(f"decoder linear fit R^2: peak_bytes {bench.linear_r2(T, peak):.4f}, ms {bench.linear_r2(T, ms):.4f}")
        T, _, peak = bench.stage(rows, "total")
        print(f"total peak allocation log-log slope: {bench.loglog_slope(T, peak):.3f}")
    return EXIT_OK


def cmd_make_toy_corpus(args) -> int:
    from .toydata import make_corpus, write_corpus

    cfg = _settings(args)
    recs = make_corpus(args.recordings, args.duration, args.speakers, args.channels, max(8, args.speakers), cfg["seed"])
    write_corpus(args.out_dir, recs)
    print(f"{len(recs)} recordings x {args.channels} channels -> {args.out_dir}")
    return EXIT_OK


# -- parser ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ms2s", description="Neural speaker diarization with memory-aware speaker embeddings.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file of key/value settings")
    common.add_argument("--seed", type=int)
    common.add_argument("--jobs", type=int, help="worker processes for per-recording work")
    common.add_argument("--dtype", choices=["float32", "float64"])
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("extract-features", parents=[common], help="log-Mel features to .feat caches")
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--wav")
    g.add_argument("--wav-dir")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--n-mels", type=int)
    s.set_defaults(fn=cmd_extract_features)

    s = sub.add_parser("init-diar", parents=[common], help="clustering-based initial diarization")
    s.add_argument("--wav-dir", required=True)
    s.add_argument("--out", required=True, help="output RTTM")
    s.add_argument("--n-speakers", type=int)
    s.add_argument("--max-speakers", type=int, default=8)
    s.add_argument("--n-mels", type=int)
    s.set_defaults(fn=cmd_init_diar)

    s = sub.add_parser("build-memory", parents=[common], help="k-means memory banks of speaker embeddings")
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--wav-dir")
    g.add_argument("--embeddings-csv", nargs="+", help="external embeddings: start,end,v0,...")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--k", type=int)
    s.add_argument("--n-mels", type=int)
    s.set_defaults(fn=cmd_build_memory)

    s = sub.add_parser("train", parents=[common], help="train on a corpus directory with reference.rttm")
    s.add_argument("--corpus", required=True)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--preset", choices=["desk", "tiny", "paper"])
    s.add_argument("--epochs", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--n-max", type=int)
    s.add_argument("--memory-k", type=int)
    s.add_argument("--dropout", type=float)
    s.add_argument("--mixup", action="store_true")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("infer", parents=[common], help="diarize recordings with a trained model")
    s.add_argument("--model", required=True, help="checkpoint manifest (.json)")
    s.add_argument("--wav-dir", required=True)
    s.add_argument("--out", required=True, help="output RTTM")
    s.add_argument("--channels", type=int, help="use at most this many channels per recording")
    s.add_argument("--iters", type=int)
    s.add_argument("--threshold", type=float)
    s.add_argument("--overlap", type=float)
    s.add_argument("--n-speakers", type=int)
    s.add_argument("--init-rttm", help="initial diarization instead of clustering")
    s.add_argument("--posteriors-dir")
    s.set_defaults(fn=cmd_infer)

    s = sub.add_parser("score", parents=[common], help="DER/JER of a hypothesis RTTM")
    s.add_argument("--ref", required=True)
    s.add_argument("--hyp", required=True)
    s.add_argument("--collar", type=float)
    s.add_argument("--no-overlap", action="store_true", help="exclude overlapped reference speech")
    s.add_argument("--out-csv")
    s.set_defaults(fn=cmd_score)

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of the full model")
    s.add_argument("--preset", "--model-config", default="tiny", choices=["tiny", "desk"])
    s.add_argument("--list", action="store_true", help="list parameter groups only")
    s.add_argument("--tol", type=float, default=1e-4)
    s.add_argument("--coords", type=int, default=8, help="coordinates probed per parameter tensor")
    s.add_argument("--inject-fault", choices=["none", "gate-sign"], default="none")
    s.set_defaults(fn=cmd_gradcheck)

    s = sub.add_parser("bench", parents=[common], help="stage cost against decoded duration")
    s.add_argument("--T", default="400,800,1600")
    s.add_argument("--N", type=int, default=2)
    s.add_argument("--repeats", type=int, default=3)
    s.add_argument("--out", help="CSV path; a .png plot is written beside it")
    s.set_defaults(fn=cmd_bench)

    s = sub.add_parser("make-toy-corpus", parents=[common], help="synthetic recordings with reference RTTM")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--recordings", type=int, default=20)
    s.add_argument("--duration", type=float, default=60.0)
    s.add_argument("--speakers", type=int, default=2)
    s.add_argument("--channels", type=int, default=1)
    s.set_defaults(fn=cmd_make_toy_corpus)
    return p


def main(argv: Iterable[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(None if argv is None else list(argv))
    except UsageExit as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except (MS2SError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
