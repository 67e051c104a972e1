"""Command-line entry point: ``vtransfer <subcommand> ...``.

Exit codes: 0 success, 1 validation or I/O error, 2 watermark not detected.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import subprocess
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import __version__

log = logging.getLogger("vtransfer")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_NOT_DETECTED = 2


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on bad usage; 2 is reserved for a negative wm-detect
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_ERROR, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# config files and sidecars


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{source}:{n}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise UsageError(f"{source}:{n}: empty key")
        out[key] = value
    return out


def _coerce(value: str, default, key: str):
    if isinstance(default, bool):
        low = value.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"{key}: expected a boolean, got {value!r}")
    try:
        return type(default)(value)
    except ValueError:
        raise UsageError(f"{key}: expected {type(default).__name__}, got {value!r}") from None


def resolve_config(cls, config_path: str | None, overrides: list[str], flags: dict):
    """Defaults < config file < ``--set key=value`` < dedicated flags."""
    defaults = {f.name: f.default for f in fields(cls)}
    raw: dict[str, str] = {}
    if config_path:
        path = Path(config_path)
        if not path.exists():
            raise UsageError(f"config file not found: {path}")
        raw.update(parse_config_text(path.read_text(), str(path)))
    for item in overrides:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        raw[k.strip()] = v.strip()
    unknown = sorted(set(raw) - set(defaults))
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(unknown)} (valid: {', '.join(defaults)})")
    values = {k: _coerce(v, defaults[k], k) for k, v in raw.items()}
    values.update({k: v for k, v in flags.items() if v is not None})
    return cls(**values)


def config_text(cfg) -> str:
    return "".join(f"{k} = {v}\n" for k, v in asdict(cfg).items())


def git_describe() -> str:
    try:
        res = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], capture_output=True,
                             text=True, cwd=Path(__file__).resolve().parent, timeout=10)
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return res.stdout.strip() if res.returncode == 0 and res.stdout.strip() else "unknown"


def write_sidecar(artifact, command: str, config: dict, seed) -> Path:
    """``<artifact>.meta.json`` with everything needed to rerun."""
    text = json.dumps(config, sort_keys=True)
    meta = {
        "command": command,
        "config": config,
        "config_hash": hashlib.sha256(text.encode()).hexdigest(),
        "seed": seed,
        "git_describe": git_describe(),
        "version": __version__,
    }
    path = Path(f"{artifact}.meta.json")
    path.write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    return path


def _log_config(command: str, text: str) -> None:
    log.info("%s resolved config:\n%s", command, text.rstrip("\n"))


def parse_token_ids(text: str) -> np.ndarray:
    parts = [p for p in text.replace(",", " ").split() if p]
    if not parts:
        raise UsageError("--text is empty; give token ids like '3,17,5'")
    try:
        ids = [int(p) for p in parts]
    except ValueError:
        raise UsageError(f"--text must be integer token ids, got {text!r}") from None
    return np.array(ids, dtype=np.int64)


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    from .data import CorpusConfig, make_corpus

    flags = {"seed": args.seed, "n_speakers": args.speakers, "n_languages": args.languages,
             "utts_per_speaker": args.utts_per_speaker}
    cfg = resolve_config(CorpusConfig, args.config, args.set, flags)
    _log_config("gen-data", config_text(cfg))
    out = make_corpus(args.out, cfg)
    write_sidecar(out / "corpus", "gen-data", asdict(cfg), cfg.seed)
    print(out)
    return EXIT_OK


def cmd_train(args) -> int:
    from .data import Corpus
    from .evaluation import corpus_id
    from .trainer import TrainConfig, save_model, train

    flags = {"bottleneck": args.bottleneck, "steps": args.steps, "seed": args.seed,
             "init_checkpoint": args.init_checkpoint, "freeze_backbone": True if args.freeze_backbone else None}
    cfg = resolve_config(TrainConfig, args.config, args.set, flags)
    _log_config("train", config_text(cfg))
    corpus = Corpus(args.corpus)
    res = train(cfg, corpus, metrics_path=args.metrics)
    extra = {"train_speakers": corpus.train_speakers, "corpus_id": corpus_id(corpus)}
    save_model(args.out, res.model, extra)
    write_sidecar(args.out, "train", asdict(cfg) | {"corpus": str(args.corpus)}, cfg.seed)
    print(args.out)
    return EXIT_OK


def cmd_probe_train(args) -> int:
    from .data import Corpus
    from .evaluation import save_probe, train_probe, train_scoring_encoder

    corpus = Corpus(args.corpus)
    config = {"corpus": str(args.corpus), "seed": args.seed, "scorer_steps": args.scorer_steps}
    _log_config("probe-train", config_text_from_dict(config))
    probe = train_probe(corpus, seed=args.seed)
    scorer = train_scoring_encoder(corpus, steps=args.scorer_steps, seed=args.seed)
    save_probe(args.out, probe, scorer)
    write_sidecar(args.out, "probe-train", config, args.seed)
    print(args.out)
    return EXIT_OK


def config_text_from_dict(d: dict) -> str:
    return "".join(f"{k} = {v}\n" for k, v in d.items())


def cmd_synth(args) -> int:
    from .audio import WatermarkKey, render_wav, wm_embed, write_wav
    from .data import read_features, write_features
    from .trainer import load_model

    tokens = parse_token_ids(args.text)
    model = load_model(args.checkpoint)
    vocab = model.config.vocab_size
    bad = [int(t) for t in tokens if not 0 <= t < vocab]
    if bad:
        raise UsageError(f"token ids {bad[:5]} outside the model vocabulary [0, {vocab})")
    ref = None
    if args.ref:
        ref = read_features(args.ref)
    elif not args.no_adapters:
        raise UsageError("--ref is required unless --no-adapters is given")
    config = {"checkpoint": str(args.checkpoint), "text": tokens.tolist(), "ref": args.ref,
              "no_adapters": args.no_adapters, "watermark_seed": args.watermark_seed}
    _log_config("synth", config_text_from_dict(config))
    syn = model.synthesize(tokens, ref, use_adapters=not args.no_adapters)
    out = Path(args.out)
    stem = out.with_suffix("") if out.suffix in (".wav", ".vtf") else out
    write_features(f"{stem}.vtf", syn.features)
    wav = render_wav(syn.features)
    if args.watermark_seed is not None:
        wav = wm_embed(wav, WatermarkKey(args.watermark_seed))
    write_wav(f"{stem}.wav", wav)
    write_sidecar(stem, "synth", config, args.watermark_seed)
    print(f"{stem}.wav")
    print(f"{stem}.vtf")
    return EXIT_OK


def _check_checkpoint_corpus(ckpt, corpus) -> None:
    from .evaluation import EvalError, check_zero_shot, corpus_id

    meta = json.loads(Path(f"{ckpt}.json").read_text())
    if "corpus_id" in meta and meta["corpus_id"] != corpus_id(corpus):
        raise EvalError(f"{ckpt} was trained on a different corpus ({meta['corpus_id']} != {corpus_id(corpus)})")
    check_zero_shot(corpus, meta.get("train_speakers", []))


def cmd_eval_crosslingual(args) -> int:
    from .data import Corpus
    from .evaluation import cross_lingual_eval, load_probe, similarity_report, write_raw_scores
    from .trainer import load_model

    corpus = Corpus(args.corpus)
    config = {"checkpoint": str(args.checkpoint), "corpus": str(args.corpus), "probe": str(args.probe),
              "texts": args.texts}
    _log_config("eval-crosslingual", config_text_from_dict(config))
    _check_checkpoint_corpus(args.checkpoint, corpus)
    model = load_model(args.checkpoint)
    probe, scorer = load_probe(args.probe)
    rows = cross_lingual_eval(model, corpus, probe, scorer, n_texts=args.texts)
    write_raw_scores(args.out, rows)
    write_sidecar(args.out, "eval-crosslingual", config, None)
    rep = similarity_report(rows)
    summary = {"cross_lingual": rep.cross_lingual, "same_language": rep.same_language,
               "pairs": {f"{a}->{b}": v for (a, b), v in rep.pairs.items()}}
    print(json.dumps(summary, indent=1, sort_keys=True))
    return EXIT_OK


def cmd_eval_bottlenecks(args) -> int:
    from .data import Corpus
    from .evaluation import (
        bottleneck_report,
        corpus_id,
        cross_lingual_eval,
        load_probe,
        read_raw_scores,
        report_csv,
        report_svg,
        write_raw_scores,
    )
    from .trainer import load_model

    if not args.checkpoint and not args.raw:
        raise UsageError("give --checkpoint (one per bottleneck) or --raw score files")
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    config = {"checkpoints": [str(c) for c in args.checkpoint], "raw": [str(r) for r in args.raw],
              "corpus": args.corpus, "probe": args.probe, "texts": args.texts}
    _log_config("eval-bottlenecks", config_text_from_dict(config))
    raw: dict[str, list[dict]] = {}
    ids: dict[str, str] = {}
    if args.checkpoint:
        if not args.corpus or not args.probe:
            raise UsageError("--checkpoint needs --corpus and --probe")
        corpus = Corpus(args.corpus)
        probe, scorer = load_probe(args.probe)
        for ckpt in args.checkpoint:
            _check_checkpoint_corpus(ckpt, corpus)
            model = load_model(ckpt)
            kind = model.config.bottleneck
            if kind in raw:
                raise UsageError(f"two checkpoints use the {kind} bottleneck")
            meta = json.loads(Path(f"{ckpt}.json").read_text())
            ids[kind] = meta.get("corpus_id", corpus_id(corpus))
            log.info("evaluating %s (%s)", ckpt, kind)
            raw[kind] = cross_lingual_eval(model, corpus, probe, scorer, n_texts=args.texts)
            write_raw_scores(out_dir / f"raw_{kind}.csv", raw[kind])
    for path in args.raw:
        rows = read_raw_scores(path)
        if not rows:
            raise UsageError(f"{path} has no score rows")
        kind = rows[0]["bottleneck"]
        if kind in raw:
            raise UsageError(f"two score sets for the {kind} bottleneck")
        raw[kind] = rows
    table = bottleneck_report(raw, ids or None)
    text = report_csv(table)
    (out_dir / "report.csv").write_text(text)
    report_svg(table, out_dir / "report.svg")
    write_sidecar(out_dir / "report", "eval-bottlenecks", config, None)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import TOLERANCE, run_all

    results = run_all(seed=args.seed)
    width = max(len(r.path) for r in results)
    for r in results:
        print(f"{r.path:<{width}}  {r.error:.3e}  {'ok' if r.ok else 'FAIL'}")
    bad = [r.path for r in results if not r.ok]
    if bad:
        print(f"{len(bad)} path(s) above tolerance {TOLERANCE:g}: {', '.join(bad)}", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_OK


def cmd_wm_embed(args) -> int:
    from .audio import WatermarkKey, read_wav, watermark_snr_db, wm_embed, write_wav

    key = WatermarkKey(args.key_seed, amplitude=args.amplitude)
    wav = read_wav(args.input)
    marked = wm_embed(wav, key)
    write_wav(args.out, marked)
    write_sidecar(args.out, "wm-embed", {"input": str(args.input), "key_seed": args.key_seed,
                                         "amplitude": args.amplitude}, args.key_seed)
    print(f"snr_db={watermark_snr_db(wav, key):.2f}")
    return EXIT_OK


def cmd_wm_detect(args) -> int:
    from .audio import WatermarkKey, read_wav, wm_detect

    key = WatermarkKey(args.key_seed, amplitude=args.amplitude)
    stat, found = wm_detect(read_wav(args.input), key, args.threshold)
    print(f"statistic={stat:.3f} threshold={args.threshold:g} detected={'yes' if found else 'no'}")
    return EXIT_OK if found else EXIT_NOT_DETECTED


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    from .audio import DEFAULT_THRESHOLD
    from .bottleneck import KINDS

    p = _Parser(prog="vtransfer", description="Zero-shot cross-lingual voice transfer toolkit (toy scale).")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-q", "--quiet", action="store_true", help="only log warnings")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    def config_args(sp):
        sp.add_argument("--config", metavar="FILE", help="key = value config file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")

    sp = sub.add_parser("gen-data", help="generate the synthetic multi-speaker corpus")
    sp.add_argument("--out", required=True, help="corpus directory")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--speakers", type=int, help="number of speakers")
    sp.add_argument("--languages", type=int, help="number of languages")
    sp.add_argument("--utts-per-speaker", type=int)
    config_args(sp)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("train", help="train backbone and voice-transfer module")
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--out", required=True, help="checkpoint path (.vtck)")
    sp.add_argument("--metrics", help="per-step metrics CSV")
    sp.add_argument("--bottleneck", choices=KINDS)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--init-checkpoint", help="start from this checkpoint")
    sp.add_argument("--freeze-backbone", action="store_true",
                    help="train only the voice-transfer module (needs --init-checkpoint)")
    config_args(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("probe-train", help="fit evaluation probes and the scoring encoder on gold data")
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--out", required=True, help="probe checkpoint path (.vtck)")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--scorer-steps", type=int, default=300)
    sp.set_defaults(func=cmd_probe_train)

    sp = sub.add_parser("synth", help="synthesize features and audio for token ids")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--text", required=True, help="token ids, comma or space separated")
    sp.add_argument("--ref", help="reference feature file (.vtf)")
    sp.add_argument("--out", required=True, help="output stem; writes <stem>.wav and <stem>.vtf")
    sp.add_argument("--no-adapters", action="store_true", help="run the plain backbone")
    sp.add_argument("--watermark-seed", type=int, help="embed a watermark with this key")
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("eval-crosslingual", help="score one checkpoint on held-out speakers")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--probe", required=True)
    sp.add_argument("--out", required=True, help="raw per-utterance scores CSV")
    sp.add_argument("--texts", type=int, default=4, help="sentences per target language")
    sp.set_defaults(func=cmd_eval_crosslingual)

    sp = sub.add_parser("eval-bottlenecks", help="compare bottlenecks: CSV table and SVG chart")
    sp.add_argument("--checkpoint", action="append", default=[], help="repeat once per bottleneck")
    sp.add_argument("--raw", action="append", default=[], help="reuse saved raw score CSVs")
    sp.add_argument("--corpus")
    sp.add_argument("--probe")
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--texts", type=int, default=4)
    sp.set_defaults(func=cmd_eval_bottlenecks)

    sp = sub.add_parser("gradcheck", help="finite-difference check of every trainable path")
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("wm-embed", help="add a keyed watermark to a WAV file")
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--key-seed", type=int, required=True)
    sp.add_argument("--amplitude", type=float, default=1e-3, help="fraction of full scale")
    sp.set_defaults(func=cmd_wm_embed)

    sp = sub.add_parser("wm-detect", help="test a WAV file for a keyed watermark (exit 2 if absent)")
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--key-seed", type=int, required=True)
    sp.add_argument("--amplitude", type=float, default=1e-3)
    sp.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD)
    sp.set_defaults(func=cmd_wm_detect)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError, KeyError, FloatingPointError) as exc:
        msg = str(exc) if not isinstance(exc, KeyError) else f"missing key {exc}"
        print(f"vtransfer {args.command}: error: {msg}", file=sys.stderr)
        return EXIT_ERROR
