"""Command-line entry point: ``mixsing <subcommand> [flags]``.

Settings are resolved as built-in defaults, then a JSON ``--config`` file,
then explicit flags.  The effective settings are written next to every
artifact a command produces.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from threadpoolctl import threadpool_limits

from .errors import ConfigError, MixsingError

log = logging.getLogger("mixsing")


@dataclass
class RunConfig:
    # model
    n_blocks: int = 16
    seq_len: int = 200
    d_phoneme: int = 256
    d_pitch: int = 32
    d_mel: int = 120
    hidden_channel: int = 768
    hidden_token: int = 200
    dropout: float = 0.5
    ablate_token_mixer: bool = False
    # training
    batch_size: int = 32
    steps: int = 20000
    warmup: int | None = None
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    grad_clip: float = 1.0
    eval_interval: int = 1000
    k: int = 3
    # inference
    w: int = 30
    # synthetic data
    songs: int = 40
    val_songs: int = 4
    seconds: float = 30.0
    base_note: int = 55
    # execution
    seed: int = 0
    threads: int = 1

    def model_config(self):
        from .model import ModelConfig
        from .score import Vocab

        vocab = Vocab(base_note=self.base_note)
        return ModelConfig(
            n_blocks=self.n_blocks,
            seq_len=self.seq_len,
            d_phoneme=self.d_phoneme,
            d_pitch=self.d_pitch,
            d_mel=self.d_mel,
            hidden_channel=self.hidden_channel,
            hidden_token=self.hidden_token,
            dropout=self.dropout,
            phoneme_vocab=vocab.phoneme_size,
            pitch_vocab=vocab.pitch_size,
            ablate_token_mixer=self.ablate_token_mixer,
        )

    def train_config(self):
        from .trainer import TrainConfig

        return TrainConfig(
            batch_size=self.batch_size,
            steps=self.steps,
            warmup=self.warmup,
            lr=self.lr,
            beta1=self.beta1,
            beta2=self.beta2,
            grad_clip=self.grad_clip,
            seed=self.seed,
            seq_len=self.seq_len,
            k=self.k,
            eval_interval=self.eval_interval,
        )


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}
_DEFAULTS = RunConfig()

_HELP = {
    "n_blocks": "number of Mixer blocks",
    "seq_len": "segment length in frames",
    "d_phoneme": "phoneme embedding width",
    "d_pitch": "pitch embedding width",
    "d_mel": "mel bins",
    "hidden_channel": "Channel Mixer hidden width",
    "hidden_token": "Token Mixer hidden width",
    "dropout": "dropout probability",
    "ablate_token_mixer": "drop the Token Mixers (Channel-Mixer-only model)",
    "batch_size": "segments per optimisation step",
    "steps": "total optimisation steps",
    "warmup": "warmup steps (default: 10%% of steps)",
    "lr": "peak learning rate",
    "beta1": "Adam beta1",
    "beta2": "Adam beta2",
    "grad_clip": "global gradient-norm clip (0 disables)",
    "eval_interval": "steps between validation/checkpoint",
    "k": "consonant frames per onset/coda",
    "w": "overlap window for overlapped segmentation",
    "songs": "training songs to generate",
    "val_songs": "validation songs to generate",
    "seconds": "seconds per generated song",
    "base_note": "lowest MIDI note of the 24-note pitch vocabulary",
    "seed": "single seed for all randomness",
    "threads": "compute threads",
}


def _parse_value(name: str, raw):
    kind = _FIELD_TYPES[name]
    if raw is None:
        return None
    try:
        if kind in ("int", int, "int | None"):
            return int(raw)
        if kind in ("float", float):
            return float(raw)
        if kind in ("bool", bool):
            if isinstance(raw, bool):
                return raw
            return str(raw).lower() in ("1", "true", "yes")
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name}: cannot parse {raw!r}") from exc
    return raw


def resolve_config(args: argparse.Namespace) -> RunConfig:
    merged = asdict(_DEFAULTS)
    if getattr(args, "config", None):
        try:
            doc = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError("config file must hold a JSON object")
        unknown = set(doc) - set(merged)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        for key, value in doc.items():
            merged[key] = _parse_value(key, value)
    for key in merged:
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value
    cfg = RunConfig(**merged)
    if cfg.threads < 1:
        raise ConfigError("threads must be >= 1")
    return cfg


def _add_flags(p: argparse.ArgumentParser, names: list[str]) -> None:
    p.add_argument("--config", help="JSON file of settings, overridden by flags (default: none)")
    for name in names:
        default = getattr(_DEFAULTS, name)
        flag = "--" + name.replace("_", "-")
        text = f"{_HELP[name]} (default: {default})"
        if isinstance(default, bool):
            p.add_argument(flag, dest=name, action="store_true", default=None, help=text)
        else:
            kind = _FIELD_TYPES[name]
            conv = float if kind in ("float", float) else int
            p.add_argument(flag, dest=name, type=conv, default=None, help=text)


MODEL_FLAGS = [
    "n_blocks", "seq_len", "d_phoneme", "d_pitch", "d_mel",
    "hidden_channel", "hidden_token", "dropout", "ablate_token_mixer", "base_note",
]
TRAIN_FLAGS = ["batch_size", "steps", "warmup", "lr", "beta1", "beta2", "grad_clip", "eval_interval", "k"]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mixsing", description="All-MLP singing-voice acoustic model")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr (default: False)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-data", help="generate a synthetic score/mel corpus")
    p.add_argument("--out", default="data", help="output directory (default: data)")
    _add_flags(p, ["songs", "val_songs", "seconds", "k", "base_note", "seed"])

    p = sub.add_parser("extract", help="WAV (+ optional score) to MEL1")
    p.add_argument("--wav", required=True, help="mono 16 kHz PCM16 WAV file")
    p.add_argument("--out", required=True, help="output MEL1 file")
    p.add_argument("--score", help="score JSON; checks that it fits inside the audio (default: none)")
    _add_flags(p, ["k", "base_note"])

    p = sub.add_parser("train", help="train a model on a corpus directory")
    p.add_argument("--data", default="data", help="corpus directory with train/ and val/ (default: data)")
    p.add_argument("--out", default="run", help="output directory (default: run)")
    p.add_argument("--resume", help="checkpoint to resume from (default: none)")
    _add_flags(p, MODEL_FLAGS + TRAIN_FLAGS + ["seed", "threads"])

    p = sub.add_parser("synth", help="synthesize a mel-spectrogram for a score")
    p.add_argument("--score", required=True, help="score JSON")
    p.add_argument("--ckpt", required=True, help="model checkpoint (TEN1)")
    p.add_argument("--out", required=True, help="output MEL1 file")
    p.add_argument("--mode", choices=("naive", "overlapped"), default="overlapped", help="segmentation (default: overlapped)")
    p.add_argument("--timing-csv", help="write per-stage timing CSV here (default: none)")
    _add_flags(p, ["w", "k", "threads"])

    p = sub.add_parser("analyze", help="Token-Mixer probes and per-position loss")
    p.add_argument("what", choices=("probe", "loss-profile"), help="analysis to run")
    p.add_argument("--ckpt", required=True, help="model checkpoint (TEN1)")
    p.add_argument("--out", default="analysis", help="output directory (default: analysis)")
    p.add_argument("--data", default="data/val", help="holdout corpus for loss-profile (default: data/val)")
    p.add_argument("--block", type=int, help="probe only this block (default: all blocks)")
    _add_flags(p, ["k", "threads"])

    p = sub.add_parser("bench", help="latency / real-time-factor benchmark")
    p.add_argument("--ckpt", help="model checkpoint; omit to benchmark a freshly initialised model (default: none)")
    p.add_argument("--frames", default="800,1600,2400,4800", help="comma-separated frame counts (default: 800,1600,2400,4800)")
    p.add_argument("--modes", default="batched,batched_overlapped,sequential", help="comma-separated modes (default: batched,batched_overlapped,sequential)")
    p.add_argument("--repeats", type=int, default=20, help="timed runs per point (default: 20)")
    p.add_argument("--warmup-runs", type=int, default=2, help="untimed runs per point (default: 2)")
    p.add_argument("--out", default="bench.csv", help="CSV report path (default: bench.csv)")
    _add_flags(p, MODEL_FLAGS + ["w", "seed", "threads"])
    return parser


def _dump(path: Path, cfg: RunConfig, **extra) -> None:
    doc = {"config": asdict(cfg), **extra}
    path.write_text(json.dumps(doc, indent=2, sort_keys=True))


def _k_from_checkpoint(doc: dict, cfg: RunConfig, args) -> int:
    if getattr(args, "k", None) is not None:
        return cfg.k
    return int(doc.get("train", {}).get("k", cfg.k))


# --------------------------------------------------------------------------
# subcommands


def cmd_make_data(args, cfg: RunConfig) -> None:
    from .features import synth_dataset, write_mel
    from .score import Vocab, serialize_score_json

    vocab = Vocab(base_note=cfg.base_note)
    out = Path(args.out)
    corpus = synth_dataset(cfg.songs + cfg.val_songs, cfg.seconds, cfg.seed, k=cfg.k, vocab=vocab)
    for split, items in (("train", corpus[: cfg.songs]), ("val", corpus[cfg.songs :])):
        d = out / split
        d.mkdir(parents=True, exist_ok=True)
        for i, (score, mel) in enumerate(items):
            (d / f"song_{i:03d}.json").write_text(serialize_score_json(score), encoding="utf-8")
            write_mel(d / f"song_{i:03d}.mel1", mel)
    _dump(out / "config.json", cfg)


def cmd_extract(args, cfg: RunConfig) -> None:
    from .features import extract_mel, read_wav, write_mel
    from .score import Vocab, align_to_frames, parse_score_json

    mel = extract_mel(read_wav(Path(args.wav).read_bytes()))
    if args.score:
        score = parse_score_json(Path(args.score).read_bytes())
        align_to_frames(score, k=cfg.k, total_frames=mel.shape[0], vocab=Vocab(base_note=cfg.base_note))
    write_mel(args.out, mel)
    _dump(Path(str(args.out) + ".config.json"), cfg, frames=int(mel.shape[0]))


def cmd_train(args, cfg: RunConfig) -> None:
    from .model import init_params
    from .trainer import TrainState, align_corpus, init_optimizer, load_corpus, load_state, train

    data = Path(args.data)
    train_corpus = load_corpus(data / "train")
    val_corpus = load_corpus(data / "val")
    if not train_corpus:
        raise ConfigError(f"no training songs found in {data / 'train'}")
    tcfg = cfg.train_config()
    if args.resume:
        state, _ = load_state(args.resume)
    else:
        params = init_params(cfg.model_config(), cfg.seed)
        state = TrainState(params, init_optimizer(params))
    vocab = _vocab(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "train_log.csv"
    if not args.resume and log_path.exists():
        log_path.unlink()
    _dump(out / "config.json", cfg)
    train(
        state,
        align_corpus(train_corpus, cfg.k, vocab),
        align_corpus(val_corpus, cfg.k, vocab),
        tcfg,
        out_dir=out,
        meta={"base_note": cfg.base_note},
    )


def _vocab(cfg: RunConfig):
    from .score import Vocab

    return Vocab(base_note=cfg.base_note)


def _load_params(path):
    from .model import load_checkpoint

    params, _, doc = load_checkpoint(path)
    return params, doc


def cmd_synth(args, cfg: RunConfig) -> None:
    import csv

    from .features import write_mel
    from .inference import make_plan, synthesize
    from .score import Vocab, align_to_frames, parse_score_json

    params, doc = _load_params(args.ckpt)
    k = _k_from_checkpoint(doc, cfg, args)
    base = int(doc.get("base_note", cfg.base_note))
    score = parse_score_json(Path(args.score).read_bytes())
    align = align_to_frames(score, k=k, vocab=Vocab(base_note=base))
    if align.frames == 0:
        raise ConfigError("score has no frames to synthesize")
    plan = make_plan(args.mode, align.frames, params.config.seq_len, cfg.w)
    result = synthesize(align, params, plan, cfg.threads)
    write_mel(args.out, result.mel)
    _dump(Path(str(args.out) + ".config.json"), cfg, mode=args.mode, k=k, frames=int(align.frames))
    if args.timing_csv:
        with open(args.timing_csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["stage", "ms"])
            for stage, ms in result.timing.items():
                w.writerow([stage, f"{ms:.6f}"])


def cmd_analyze(args, cfg: RunConfig) -> None:
    import csv

    from .analysis import export_heatmap, identity_probe, loss_profile
    from .trainer import align_corpus, load_corpus, segment_corpus

    params, doc = _load_params(args.ckpt)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.what == "probe":
        blocks = [args.block] if args.block is not None else range(params.config.n_blocks)
        rows = []
        for i in blocks:
            probe = identity_probe(params, i)
            export_heatmap(probe.matrix, out / f"probe_block{i}.pgm")
            rows.append((i, probe.diagonal_constancy, probe.bandwidth))
        with (out / "probe_report.csv").open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["block", "diagonal_constancy", "bandwidth"])
            for i, dc, bw in rows:
                w.writerow([i, f"{dc:.6f}", bw])
    else:
        k = _k_from_checkpoint(doc, cfg, args)
        corpus = load_corpus(args.data)
        if not corpus:
            raise ConfigError(f"no holdout songs found in {args.data}")
        segments = segment_corpus(align_corpus(corpus, k), params.config.seq_len)
        profile = loss_profile(params, segments)
        with (out / "loss_profile.csv").open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["position", "l1"])
            for pos, v in enumerate(profile):
                w.writerow([pos, repr(float(v))])
    _dump(out / f"{args.what}.config.json", cfg, ckpt=str(args.ckpt))


def cmd_bench(args, cfg: RunConfig) -> None:
    from .bench import MODES, measure, report
    from .model import init_params

    if args.ckpt:
        params, _ = _load_params(args.ckpt)
    else:
        params = init_params(cfg.model_config(), cfg.seed)
    try:
        frames = [int(f) for f in args.frames.split(",") if f.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad --frames list: {args.frames}") from exc
    modes = [m.strip() for m in args.modes.split(",") if m.strip()]
    for m in modes:
        if m not in MODES:
            raise ConfigError(f"unknown mode {m!r}; choose from {MODES}")
    results = []
    for m in modes:
        results += measure(params, frames, m, repeats=args.repeats, warmup=args.warmup_runs, threads=cfg.threads, w=cfg.w, seed=cfg.seed)
    path = report(results, args.out)
    _dump(Path(str(path) + ".config.json"), cfg, threads=cfg.threads, modes=modes, frames=frames)


COMMANDS = {
    "make-data": cmd_make_data,
    "extract": cmd_extract,
    "train": cmd_train,
    "synth": cmd_synth,
    "analyze": cmd_analyze,
    "bench": cmd_bench,
}


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = resolve_config(args)
        with threadpool_limits(limits=cfg.threads):
            COMMANDS[args.command](args, cfg)
    except (MixsingError, OSError, KeyError, json.JSONDecodeError) as exc:
        msg = str(exc).replace("\n", " ")
        print(f"mixsing: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
