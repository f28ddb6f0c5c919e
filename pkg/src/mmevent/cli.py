"""Command-line entry point: ``mmevent {stats,train,eval,prompt-eval,perturb}``.

Option precedence is flags > ``--config`` file > ``MED_*`` environment
variables > built-in defaults. Every command except ``stats`` writes into a
fresh run directory ``<out>/<command>-<timestamp>/`` holding ``config.json``,
its outputs, ``run.log`` and a ``metadata.json`` with wall-clock timestamps.

Exit codes: 0 success, 2 usage/configuration/data error, 3 numeric failure,
4 delivery failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Mapping

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import __version__
from .core import Instance, dataset_stats, format_stats, load_manifest, write_manifest
from .encoders import BACKENDS, EncoderSpec
from .errors import MMEventError, NumericError
from .evaluation import emit_report, score, write_predictions
from .fusion import HEADS, FusionConfig, get_head, load_checkpoint, save_checkpoint
from .perturb import KINDS, PerturbationSpec, perturb

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_DELIVERY = 0, 2, 3, 4
ENV_PREFIX = "MED_"
SECRET_KEYS = {"api_key"}


class UsageError(Exception):
    pass


# option name -> (type, default); flags use the same names with dashes
OPTIONS: dict[str, dict[str, tuple[type, Any]]] = {
    "common": {"seed": (int, 0), "out": (str, "runs")},
    "train": {
        "head": (str, "vanilla_fusion"),
        "text_backend": (str, "toy-text"), "vision_backend": (str, "toy-vision"),
        "text_model": (str, ""), "vision_model": (str, ""),
        "text_dim": (int, 64), "vision_dim": (int, 64), "encoder_seed": (int, 0),
        "d_attn": (int, 16), "d_model": (int, 64), "n_chunks": (int, 4),
        "epochs": (int, 30), "batch_size": (int, 32), "lr": (float, 1e-2),
        "warmup_fraction": (float, 0.1), "patience": (int, 3), "val_fraction": (float, 0.1),
        "balanced": (bool, True),
    },
    "eval": {"checkpoint": (str, ""), "split": (str, "test"),
             "text_dim": (int, None), "vision_dim": (int, None)},
    "prompt-eval": {
        "mode": (str, "multimodal"), "split": (str, "test"), "mock_fixture": (str, ""),
        "model": (str, "gpt-4o"), "api_base": (str, ""), "api_key": (str, ""),
        "temperature": (float, 0.7), "nucleus_or_topk": (float, 0.8), "max_tokens": (int, 64),
        "max_retries": (int, 3), "backoff": (float, 0.5), "max_in_flight": (int, 4),
        "rate_per_sec": (float, 0.0), "error_sample_size": (int, 250),
    },
    "perturb": {"kind": (str, "leetspeak"), "intensity": (float, 1.0), "leet_chars": (str, ""),
                "output": (str, "")},
    "stats": {},
}


def _coerce(kind: type, value):
    if value is None or kind is str:
        return value
    if kind is bool and isinstance(value, str):
        return value.strip().lower() in ("1", "true", "yes", "on")
    return kind(value)


def resolve_config(command: str, flags: Mapping[str, Any], config_path: str | None,
                   env: Mapping[str, str]) -> dict:
    """Merge defaults, environment, config file and explicit flags (later wins)."""
    spec = {**OPTIONS["common"], **OPTIONS[command]}
    cfg = {k: d for k, (_, d) in spec.items()}
    for k, (kind, _) in spec.items():
        if ENV_PREFIX + k.upper() in env:
            cfg[k] = _coerce(kind, env[ENV_PREFIX + k.upper()])
    if config_path:
        try:
            with open(config_path, "rb") as fh:
                data = tomllib.load(fh)
        except (OSError, tomllib.TOMLDecodeError) as exc:
            raise UsageError(f"cannot read config {config_path}: {exc}") from exc
        section = data.get(command, {})
        flat = {k: v for k, v in data.items() if not isinstance(v, dict)}
        for k, v in {**flat, **section}.items():
            k = k.replace("-", "_")
            if k not in spec:
                raise UsageError(f"unknown option {k!r} in {config_path} for {command}")
            cfg[k] = _coerce(spec[k][0], v)
    for k, v in flags.items():
        if v is not None and k in spec:
            cfg[k] = _coerce(spec[k][0], v)
    return cfg


# --- run directory helpers --------------------------------------------------------

class Run:
    def __init__(self, command: str, cfg: dict):
        stamp = datetime.now(timezone.utc).strftime("%Y%m%d-%H%M%S-%f")
        self.dir = Path(cfg["out"]) / f"{command}-{stamp}"
        self.dir.mkdir(parents=True, exist_ok=False)
        self.started = time.time()
        self.command = command
        snapshot = {k: v for k, v in cfg.items() if k not in SECRET_KEYS}
        (self.dir / "config.json").write_text(json.dumps({"command": command, **snapshot},
                                                         indent=2, sort_keys=True) + "\n")
        self._handler = logging.FileHandler(self.dir / "run.log", encoding="utf-8")
        self._handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
        logging.getLogger("mmevent").addHandler(self._handler)

    def path(self, name: str) -> Path:
        return self.dir / name

    def close(self, status: int) -> None:
        meta = {"command": self.command, "version": __version__, "exit_code": status,
                "started_at": datetime.fromtimestamp(self.started, timezone.utc).isoformat(),
                "finished_at": datetime.now(timezone.utc).isoformat(),
                "duration_sec": round(time.time() - self.started, 3)}
        (self.dir / "metadata.json").write_text(json.dumps(meta, indent=2) + "\n")
        logging.getLogger("mmevent").removeHandler(self._handler)
        self._handler.close()


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# --- commands --------------------------------------------------------------------

def cmd_stats(args, cfg) -> int:
    manifest = load_manifest(args.manifest)
    print(format_stats(dataset_stats(manifest)))
    return EXIT_OK


def _encoder_specs(cfg) -> tuple[EncoderSpec, EncoderSpec]:
    def spec(modality, backend, dim, model):
        if backend not in BACKENDS:
            raise UsageError(f"unknown {modality} backend {backend!r}; valid: {sorted(BACKENDS)}")
        opts = {"seed": str(cfg["encoder_seed"])}
        if model:
            opts["model"] = model
        return EncoderSpec(modality, backend, dim, opts)
    return (spec("text", cfg["text_backend"], cfg["text_dim"], cfg["text_model"]),
            spec("vision", cfg["vision_backend"], cfg["vision_dim"], cfg["vision_model"]))


def cmd_train(args, cfg) -> int:
    from .training import TrainConfig, head_encoders, train

    if cfg["head"] not in HEADS:
        raise UsageError(f"invalid head {cfg['head']!r}; valid heads: {', '.join(HEADS)}")
    manifest = load_manifest(args.manifest)
    text_spec, vision_spec = head_encoders(cfg["head"], *_encoder_specs(cfg))
    tcfg = TrainConfig(epochs_max=cfg["epochs"], batch_size=cfg["batch_size"], lr_peak=cfg["lr"],
                       warmup_fraction=cfg["warmup_fraction"], patience=cfg["patience"],
                       seed=cfg["seed"], balanced_sampling=cfg["balanced"],
                       val_fraction=cfg["val_fraction"])
    fcfg = FusionConfig(d_attn=cfg["d_attn"], d_model=cfg["d_model"], n_chunks=cfg["n_chunks"])
    run = Run("train", cfg)
    status = EXIT_NUMERIC
    try:
        params, report = train(cfg["head"], (text_spec, vision_spec), manifest, tcfg, fcfg)
        encoders = {"text": text_spec.to_dict() if text_spec else None,
                    "vision": vision_spec.to_dict() if vision_spec else None}
        save_checkpoint(params, run.path("checkpoint.npz"), {"encoders": encoders})
        run.path("train_report.json").write_text(report.to_json() + "\n")
        print(f"{run.dir}\nbest_val_f1={report.best_val_f1:.4f} epochs_run={report.epochs_run} "
              f"stopped_early={report.stopped_early}")
        status = EXIT_OK
    finally:
        run.close(status)
    return status


def _encoders_from_checkpoint(header: dict, cfg) -> tuple[EncoderSpec | None, EncoderSpec | None]:
    specs = []
    for modality, override in (("text", cfg["text_dim"]), ("vision", cfg["vision_dim"])):
        d = (header.get("encoders") or {}).get(modality)
        if d is None:
            specs.append(None)
            continue
        s = EncoderSpec.from_dict(d)
        if override is not None:
            s = EncoderSpec(s.modality, s.backend, override, s.backend_options)
        specs.append(s)
    return specs[0], specs[1]


def cmd_eval(args, cfg) -> int:
    from .core import LABELS
    from .training import EmbeddingCache, predict_rows

    if not cfg["checkpoint"]:
        raise UsageError("--checkpoint is required")
    try:
        params = load_checkpoint(cfg["checkpoint"])
    except (OSError, ValueError, KeyError) as exc:
        raise UsageError(f"cannot load checkpoint {cfg['checkpoint']}: {exc}") from exc
    text_spec, vision_spec = _encoders_from_checkpoint(params.meta, cfg)
    head = get_head(params.head)
    for spec, uses, expected in ((text_spec, head.uses_text, params.config.d_text),
                                 (vision_spec, head.uses_vision, params.config.d_vision)):
        if uses and (spec is None or spec.output_dim != expected):
            got = spec.output_dim if spec else None
            raise UsageError(f"encoder dim {got} does not match checkpoint dim {expected}")
    manifest = load_manifest(args.manifest)
    rows = manifest.split(cfg["split"])
    if not rows:
        raise UsageError(f"manifest has no {cfg['split']!r} rows")
    run = Run("eval", cfg)
    status = EXIT_USAGE
    try:
        probs = predict_rows(params, EmbeddingCache(manifest, text_spec, vision_spec), rows)
        preds = [LABELS[int(i)] for i in probs.argmax(axis=1)]
        write_predictions(run.path("predictions.jsonl"), [
            {"id": r.id, "gold": r.label.display if r.label else None, "predicted": p.display,
             "probs": [round(float(x), 12) for x in pr]}
            for r, p, pr in zip(rows, preds, probs)])
        labelled = [(p, r.label) for r, p in zip(rows, preds) if r.label is not None]
        if labelled:
            report = score(labelled)
            _write_json(run.path("metrics.json"), report.to_dict())
            name = f"{params.head}"
            run.path("metrics.md").write_text(emit_report([(name, report, "supervised")]))
            run.path("metrics.csv").write_text(emit_report([(name, report, "supervised")], "csv"))
            print(f"{run.dir}\nprecision={report.precision:.4f} recall={report.recall:.4f} "
                  f"f1={report.f1:.4f}")
        else:
            print(f"{run.dir}\n(no gold labels; predictions only)")
        status = EXIT_OK
    finally:
        run.close(status)
    return status


def cmd_prompt_eval(args, cfg) -> int:
    from .genai import GenerativeClient, HttpTransport, MockTransport, SamplingParams, prompt_eval
    from .genai.prompt import MODES

    if cfg["mode"] not in MODES:
        raise UsageError(f"invalid mode {cfg['mode']!r}; valid modes: {', '.join(MODES)}")
    manifest = load_manifest(args.manifest)
    params = SamplingParams(cfg["temperature"], cfg["nucleus_or_topk"], cfg["max_tokens"])
    in_flight = cfg["max_in_flight"]
    if cfg["mock_fixture"]:
        transport = MockTransport.from_jsonl(cfg["mock_fixture"])
        if transport.order_sensitive:
            in_flight = 1
    else:
        env = dict(os.environ)
        if cfg["api_base"]:
            env["MED_API_BASE"] = cfg["api_base"]
        if cfg["api_key"]:
            env["MED_API_KEY"] = cfg["api_key"]
        transport = HttpTransport.from_env(cfg["model"], env)
    run = Run("prompt-eval", cfg)
    status = EXIT_USAGE
    try:
        client = GenerativeClient(transport, max_retries=cfg["max_retries"], backoff=cfg["backoff"],
                                  max_in_flight=in_flight, rate_per_sec=cfg["rate_per_sec"] or None,
                                  audit_log=run.path("audit.jsonl"))
        result = prompt_eval(manifest, cfg["mode"], client, params, exemplar_seed=cfg["seed"],
                             split=cfg["split"], error_sample_size=cfg["error_sample_size"],
                             error_seed=cfg["seed"])
        write_predictions(run.path("generations.jsonl"), result.records)
        _write_json(run.path("metrics.json"), {**result.report.to_dict(),
                                              "delivery_failures": result.delivery_failures,
                                              "exemplar_labels": result.exemplar_labels})
        name = f"{cfg['model'] if not cfg['mock_fixture'] else 'mock'} ({cfg['mode']})"
        run.path("metrics.md").write_text(emit_report([(name, result.report, "generative")]))
        _write_json(run.path("error_histogram.json"), result.histogram.to_dict())
        rep = result.report
        print(f"{run.dir}\nprecision={rep.precision:.4f} recall={rep.recall:.4f} f1={rep.f1:.4f} "
              f"delivery_failures={result.delivery_failures}")
        status = EXIT_DELIVERY if result.delivery_failure_rate > 0.5 else EXIT_OK
        if status == EXIT_DELIVERY:
            print(f"error: {result.delivery_failures}/{len(result.records)} requests failed",
                  file=sys.stderr)
    finally:
        run.close(status)
    return status


def cmd_perturb(args, cfg) -> int:
    spec = PerturbationSpec(cfg["kind"], cfg["intensity"], cfg["seed"], cfg["leet_chars"] or None)
    manifest = load_manifest(args.manifest)
    run = Run("perturb", cfg)
    status = EXIT_USAGE
    try:
        out = Path(cfg["output"]) if cfg["output"] else run.path("manifest.csv")
        out.parent.mkdir(parents=True, exist_ok=True)
        rows = []
        for r in manifest.rows:
            image = r.image_ref
            if isinstance(image, str):
                image = os.path.relpath(manifest.resolve_image(r), out.parent.resolve()) \
                    if not Path(image).is_absolute() else image
            rows.append(Instance(r.id, perturb(r.text, spec), image, r.label, r.split))
        write_manifest(rows, out, {"perturbation": [spec.describe()] * len(rows)})
        print(out)
        status = EXIT_OK
    finally:
        run.close(status)
    return status


COMMANDS = {"stats": cmd_stats, "train": cmd_train, "eval": cmd_eval,
            "prompt-eval": cmd_prompt_eval, "perturb": cmd_perturb}


def _add_options(p: argparse.ArgumentParser, command: str) -> None:
    for name, (kind, default) in {**OPTIONS["common"], **OPTIONS[command]}.items():
        flag = "--" + name.replace("_", "-")
        if kind is bool:
            p.add_argument(flag, dest=name, action=argparse.BooleanOptionalAction, default=None)
        else:
            p.add_argument(flag, dest=name, type=kind, default=None,
                           help=f"default: {default!r}" if default not in ("", None) else None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mmevent", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {"stats": "per-label split counts of a manifest",
             "train": "train a classifier head",
             "eval": "score a checkpoint on a manifest split",
             "prompt-eval": "five-shot generative evaluation",
             "perturb": "write a noisy copy of a manifest"}
    for name in COMMANDS:
        p = sub.add_parser(name, help=helps[name])
        p.add_argument("--manifest", required=True)
        p.add_argument("--config", default=None, help="TOML file with option defaults")
        if name != "stats":
            _add_options(p, name)
    parser.epilog = f"heads: {', '.join(HEADS)}; perturbations: {', '.join(KINDS)}"
    return parser


def main(argv: list[str] | None = None, env: Mapping[str, str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    console = logging.StreamHandler()
    console.setLevel(logging.INFO if args.verbose else logging.WARNING)
    console.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    pkg_log = logging.getLogger("mmevent")
    pkg_log.setLevel(logging.INFO)
    pkg_log.addHandler(console)
    try:
        flags = {k: v for k, v in vars(args).items() if k not in ("command", "config", "verbose")}
        cfg = resolve_config(args.command, flags, args.config,
                             os.environ if env is None else env)
        return COMMANDS[args.command](args, cfg)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, MMEventError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    finally:
        pkg_log.removeHandler(console)


if __name__ == "__main__":
    sys.exit(main())
