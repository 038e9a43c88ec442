"""Command-line front end: simulate, record, score, sync, integrate, serve."""

import argparse
import sys
import time
from pathlib import Path

import numpy as np

from . import offline, scoring, sync
from .acquisition import Policy, RecordingClient
from .core import SAMPLE_RATE_HZ, SleepStage
from .errors import SomnoloopError
from .protocol import ChannelId
from .recfiles import read_emg_csv, read_emg_txt, read_raw_txt
from .scoring import build_corpus, load_corpus, load_model, save_corpus, save_model
from .simulator import HeadbandSimulator, JitterModel, ReplaySource, SyntheticSource


def _parse_schedule(text: str):
    """``N2:4,N3:2`` -> [(SleepStage.N2, 4), (SleepStage.N3, 2)]."""
    out = []
    for part in text.split(","):
        name, _, count = part.partition(":")
        out.append((SleepStage[name.strip().upper()], int(count or 1)))
    return out


def cmd_simulate(args) -> int:
    if args.source == "synthetic":
        source = SyntheticSource(_parse_schedule(args.schedule), seed=args.seed)
    else:
        source = ReplaySource(Path(args.source))
    sim = HeadbandSimulator(source, jitter=JitterModel.parse(args.jitter),
                            port=args.port, speed=args.speed,
                            command_log_path=args.command_log)
    sim.start()
    host, port = sim.address
    print(f"serving {source.n_frames} frames on {host}:{port} "
          f"(jitter {args.jitter}, speed x{args.speed:g})")
    try:
        while True:
            time.sleep(0.5)
    except KeyboardInterrupt:
        pass
    finally:
        sim.stop()
    return 0


def cmd_record(args) -> int:
    scorer = None
    if args.score == "on":
        if not args.model:
            print("--score on needs --model", file=sys.stderr)
            return 2
        scorer = scoring.RealtimeScorer.from_file(Path(args.model),
                                                  budget_ms=args.budget_ms)
    client = RecordingClient(Path(args.out), policy=Policy(args.policy),
                             scorer=scorer, budget_ms=args.budget_ms)
    client.connect(args.host, args.port)
    print(f"recording from {args.host}:{args.port} into {args.out}")
    try:
        client.wait()
    except KeyboardInterrupt:
        print("interrupted; finalizing")
    written = client.finalize()
    rows = client.engine.sample_log_rows()
    if rows:
        from . import report
        written["sample_log.png"] = report.render_sample_log(
            rows, Path(args.out) / "sample_log.png")
    for path in written.values():
        print(f"wrote {path}")
    dropped = client.engine.total_delivered - client.engine.total_stored
    print(f"{client.engine.total_delivered} samples delivered, {dropped} dropped, "
          f"{len(client.events)} epochs")
    return 0


def cmd_score(args) -> int:
    model = load_model(Path(args.model))
    rec = offline.integrate(lossless=read_raw_txt(Path(args.infile)))
    hyp = offline.score_offline(rec, model)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    hyp.write_csv(out)
    print(f"wrote {out} ({len(hyp)} epochs)")

    from . import report
    fig_dir = out.parent
    report.render_hypnogram(hyp, fig_dir / "hypnogram.png")
    report.render_tfr(offline.full_night_tfr(rec), fig_dir / "tfr.png")
    print(f"wrote {fig_dir / 'hypnogram.png'}")
    print(f"wrote {fig_dir / 'tfr.png'}")
    return 0


def cmd_train(args) -> int:
    corpus = Path(args.corpus)
    if corpus.is_dir():
        corpus = corpus / "corpus.npz"
    X, y, names = load_corpus(corpus)
    model = scoring.train(X, y, names, seed=args.seed)
    save_model(model, Path(args.out))
    print(f"trained on {X.shape[0]} epochs x {X.shape[1]} features; "
          f"kept {int(model.mask.sum())} after selection")
    print(f"wrote {args.out}")
    return 0


def cmd_make_corpus(args) -> int:
    X, y, names = build_corpus(epochs_per_stage=args.epochs_per_stage, seed=args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_corpus(out, X, y, names)
    print(f"wrote {out}: {X.shape[0]} epochs x {X.shape[1]} features, "
          f"{args.epochs_per_stage} per stage")
    return 0


def cmd_sync(args) -> int:
    a = read_raw_txt(Path(args.a)).channel_physical(ChannelId.EEG_L)
    b = read_raw_txt(Path(args.b)).channel_physical(ChannelId.EEG_L)
    result = sync.xcorr_lag(a, b, SAMPLE_RATE_HZ,
                            window_start_s=args.window[0],
                            window_len_s=args.window[1],
                            max_lag_s=args.max_lag)
    print(f"lag_samples={result.lag_samples} lag_seconds={result.lag_seconds:.6f} "
          f"peak={result.peak:.4f} window={args.window[0]:g}+{args.window[1]:g}s")
    return 0


def _load_emg(path: Path, rate: float):
    if path.suffix.lower() == ".csv":
        return read_emg_csv(path)
    if rate is None:
        raise SomnoloopError(f"{path}: bare-table EMG needs --emg-rate")
    return read_emg_txt(path, rate)


def cmd_sync_emg(args) -> int:
    eeg_rec = read_raw_txt(Path(args.eeg))
    eeg = eeg_rec.channel_physical(ChannelId.EEG_L)
    emg_rate, emg_channels = _load_emg(Path(args.emg), args.emg_rate)
    emg = next(iter(emg_channels.values()))

    if args.manual:
        t_eeg, t_emg = args.manual
        result = sync.sync_manual(t_eeg, t_emg, len(eeg) / SAMPLE_RATE_HZ,
                                  len(emg) / emg_rate)
    else:
        if args.event is None:
            print("need --event (label or seconds) or --manual", file=sys.stderr)
            return 2
        try:
            event_sample = int(float(args.event) * SAMPLE_RATE_HZ)
        except ValueError:
            from .stimulation import import_annotations
            store = import_annotations(Path(args.eeg).parent / "annotations.json")
            match = [a for a in store if a.label == args.event]
            if not match:
                print(f"no annotation labeled {args.event!r}", file=sys.stderr)
                return 2
            event_sample = match[0].sample_index
        result = sync.sync_emg_auto(eeg, emg, emg_rate, event_sample,
                                    search_s=args.search_s)
    native = result.metadata.get("lag_emg_native_samples")
    extra = f" emg_native={native}" if native is not None else ""
    print(f"method={result.method.value} lag_samples={result.lag_samples} "
          f"lag_seconds={result.lag_seconds:.6f}{extra}")
    return 0


def cmd_integrate(args) -> int:
    rec = offline.load_session(
        engine_dir=Path(args.engine) if args.engine else None,
        lossless_path=Path(args.lossless) if args.lossless else None,
        emg_path=Path(args.emg) if args.emg else None,
        emg_rate_hz=args.emg_rate,
        emg_event_label=args.event,
        manual_emg_times=tuple(args.manual) if args.manual else None)
    if args.model:
        offline.score_offline(rec, load_model(Path(args.model)))
    written = offline.export(rec, Path(args.out))
    for path in written:
        print(f"wrote {path}")
    for r in rec.sync_results:
        print(f"sync {r.method.value}: lag {r.lag_samples} samples "
              f"({r.lag_seconds:.3f} s)")
    return 0


def cmd_sync_demo(args) -> int:
    """Scripted offset-recovery walkthrough on a synthetic pair."""
    planted = args.offset
    rng = np.random.default_rng(args.seed)
    n_keep = int(180 * SAMPLE_RATE_HZ)
    base = rng.standard_normal(int(250 * SAMPLE_RATE_HZ))
    # b starts `planted` samples earlier in the shared source, so b is the
    # delayed copy of a; both get independent noise at roughly 20 dB SNR.
    a = base[planted:planted + n_keep] + 0.1 * rng.standard_normal(n_keep)
    b = base[:n_keep] + 0.1 * rng.standard_normal(n_keep)

    result = sync.xcorr_lag(a, b, SAMPLE_RATE_HZ)
    aligned = sync.align(a, b, result)
    residual = sync.xcorr_lag(aligned.a, aligned.b, SAMPLE_RATE_HZ)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    csv = out / "sync_demo.csv"
    with open(csv, "w", encoding="utf-8") as fh:
        fh.write("planted,recovered,residual,peak\n")
        fh.write(f"{planted},{result.lag_samples},{residual.lag_samples},"
                 f"{result.peak:.4f}\n")
    print(f"wrote {csv}")

    from . import report
    fig = report.render_sync_demo(a, b, result, aligned, out / "sync_demo.png")
    print(f"wrote {fig}")

    ok = result.lag_samples == planted and residual.lag_samples == 0
    print(f"planted {planted}, recovered {result.lag_samples} "
          f"(peak {result.peak:.4f}), post-align residual {residual.lag_samples} "
          f"-> {'OK' if ok else 'MISMATCH'}")
    return 0 if ok else 1


def cmd_gateway(args) -> int:
    from .gateway import serve_gateway
    frontend = Path(args.frontend) if args.frontend else None
    if frontend is None and Path("frontend/dist").is_dir():
        frontend = Path("frontend/dist")
    print(f"gateway on http://{args.host}:{args.port} "
          f"(data root {args.data_root}, ui {frontend or 'none'})")
    serve_gateway(args.host, args.port, Path(args.data_root), frontend)
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="somnoloop",
        description="Sleep-wearable engineering stack: headband simulator, "
                    "real-time acquisition, staging, sync, and gateway.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="serve a synthetic or replayed headband stream")
    p.add_argument("--source", default="synthetic",
                   help="'synthetic' or a raw .txt recording to replay")
    p.add_argument("--schedule", default="N2:4",
                   help="synthetic stage schedule, e.g. N2:4,N3:2,REM:2")
    p.add_argument("--jitter", default="none",
                   help="none | gaussian[:sigma_ms] | bursty[:pause_ms[:period_s]]")
    p.add_argument("--port", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--speed", type=float, default=1.0)
    p.add_argument("--command-log", type=Path, default=None)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("record", help="connect to a stream and record a session")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--policy", choices=["drop", "buffer"], default="drop")
    p.add_argument("--score", choices=["on", "off"], default="off")
    p.add_argument("--model", default=None)
    p.add_argument("--budget-ms", type=float, default=30.0)
    p.set_defaults(func=cmd_record)

    p = sub.add_parser("score", help="score a raw recording offline")
    p.add_argument("--model", required=True)
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", default="hypnogram.csv")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("train", help="train a staging model from a saved corpus")
    p.add_argument("--corpus", required=True,
                   help="corpus .npz (or a directory containing corpus.npz)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("make-corpus", help="synthesize a labeled training corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs-per-stage", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_make_corpus)

    p = sub.add_parser("sync", help="estimate the lag between two recordings")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--window", type=float, nargs=2, default=[100.0, 30.0],
                   metavar=("START_S", "LEN_S"))
    p.add_argument("--max-lag", type=float, default=30.0)
    p.set_defaults(func=cmd_sync)

    p = sub.add_parser("sync-emg", help="align an external EMG to an EEG recording")
    p.add_argument("--eeg", required=True)
    p.add_argument("--emg", required=True)
    p.add_argument("--emg-rate", type=float, default=None,
                   help="sample rate for bare-table (.txt) EMG files")
    p.add_argument("--event", default=None,
                   help="annotation label, or the event time in seconds")
    p.add_argument("--search-s", type=float, default=30.0)
    p.add_argument("--manual", type=float, nargs=2, default=None,
                   metavar=("T_EEG", "T_EMG"),
                   help="event times picked by eye in each file")
    p.set_defaults(func=cmd_sync_emg)

    p = sub.add_parser("integrate",
                       help="merge engine/lossless/EMG sources and export")
    p.add_argument("--engine", default=None, help="engine session directory")
    p.add_argument("--lossless", default=None, help="lossless raw .txt")
    p.add_argument("--emg", default=None)
    p.add_argument("--emg-rate", type=float, default=None)
    p.add_argument("--event", default=None, help="EMG alignment event label")
    p.add_argument("--manual", type=float, nargs=2, default=None,
                   metavar=("T_EEG", "T_EMG"))
    p.add_argument("--model", default=None, help="score the merged night")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_integrate)

    p = sub.add_parser("sync-demo",
                       help="scripted lag-recovery demo with figures")
    p.add_argument("--out", default="sync-demo")
    p.add_argument("--offset", type=int, default=2172)
    p.add_argument("--seed", type=int, default=7)
    p.set_defaults(func=cmd_sync_demo)

    p = sub.add_parser("gateway", help="run the HTTP/WebSocket control gateway")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8765)
    p.add_argument("--data-root", default="somnoloop-data")
    p.add_argument("--frontend", default=None,
                   help="built UI assets to serve at / (default: frontend/dist)")
    p.set_defaults(func=cmd_gateway)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except SomnoloopError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
