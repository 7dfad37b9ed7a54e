"""Command-line entry point: train / eval / invert / serve / client / analyze / ablate.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import math
import os
import sys
from dataclasses import replace

import numpy as np

from . import checkpoint
from .config import Config, load_config, registry_help
from .data import ArrayDataset, domain_dataset, load_cifar_dir, make_dataset
from .errors import ConfigError, PGNError
from .training import Classifier, PromptedModel

ABLATIONS = {
    "prompts": (1, 4, 8, 16, 64),
    "library": (8, 16, 64, 256, 1024),
    "backbone": ("mlp_center_crop", "resnet10", "resnet18"),
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# model and data assembly


def _load_cfg(args) -> Config:
    overrides = dict(kv.split("=", 1) for kv in (args.set or []) if "=" in kv)
    bad = [kv for kv in (args.set or []) if "=" not in kv]
    if bad:
        raise ConfigError(f"--set expects key=value, got {bad[0]!r}")
    if args.config:
        return load_config(args.config, {k.strip(): v.strip() for k, v in overrides.items()})
    cfg = Config()
    for k, v in overrides.items():
        cfg.set(k.strip(), v.strip())
    return cfg


def build_model(cfg: Config, seed: int, *, kind: str | None = None, num_classes: int | None = None,
                k: int | None = None, n: int | None = None, backbone: str | None = None,
                r_max: int | None = None) -> PromptedModel:
    """Frozen encoder (``encoder.seed``), prompt source (``seed``) and classifier (``seed + 1``)."""
    from .encoder import init_frozen
    from .generator import build_prompt_source

    num_classes = num_classes or cfg["data.num_classes"]
    enc_cfg = cfg.encoder_config(num_classes)
    if r_max is not None:
        enc_cfg = replace(enc_cfg, r_max=r_max)
    ckpt = cfg["encoder.checkpoint"] or None
    enc = init_frozen(enc_cfg, cfg["encoder.seed"], ckpt)
    kind = kind or cfg["pgn.kind"]
    k = cfg["pgn.prompts"] if k is None else k
    source = None
    if kind != "none" and k > 0:
        source = build_prompt_source(kind, k, n or cfg["pgn.library"], enc_cfg.embed_dim,
                                     backbone or cfg["pgn.backbone"], cfg["pgn.head"],
                                     cfg["pgn.input_resolution"], seed)
    classifier = Classifier(num_classes, enc_cfg.embed_dim, cfg["train.classifier"], seed + 1)
    return PromptedModel(enc, source, classifier)


def _infer_shapes(entries: dict, cfg: Config) -> dict:
    """Prompt-source kind, K, N, class count and r_max recovered from tensor shapes."""
    enc_cfg = cfg.encoder_config()
    out = {"num_classes": entries["cls.weight"].data.shape[0]}
    pos_rows = entries["enc.e_pos"].data.shape[0]
    out["r_max"] = (pos_rows - 1) // enc_cfg.grid_w - enc_cfg.grid_h
    if "pgn.iip.prompts" in entries:
        out.update(kind="iip", k=entries["pgn.iip.prompts"].data.shape[0])
    elif "pgn.direct.head.out.weight" in entries:
        out.update(kind="direct", k=entries["pgn.direct.head.out.weight"].data.shape[1] // enc_cfg.embed_dim)
    elif "lib.L" in entries:
        n = entries["lib.L"].data.shape[0]
        out.update(kind="pgn", n=n, k=entries["pgn.head.out.weight"].data.shape[1] // n)
    else:
        out.update(kind="none", k=0)
    return out


def load_model(cfg: Config, path) -> PromptedModel:
    entries = checkpoint.load(path)
    if "cls.weight" not in entries or "enc.e_pos" not in entries:
        raise PGNError(f"{path}: not a full model checkpoint")
    model = build_model(cfg, 0, **_infer_shapes(entries, cfg))
    model.load_entries(entries)
    return model


def load_data(cfg: Config, split: str) -> ArrayDataset:
    source = cfg["data.source"]
    if source == "synthetic":
        return make_dataset(cfg.synthetic_spec(), split)
    if not cfg["data.path"]:
        raise ConfigError(f"data.path is required for data.source = {source}")
    if cfg["encoder.image_size"] != 32:
        raise ConfigError("encoder.image_size must be 32 for CIFAR")
    ds = load_cifar_dir(cfg["data.path"], source, split)
    if ds.num_classes != cfg["data.num_classes"]:
        raise ConfigError(f"data.num_classes must be {ds.num_classes} for {source}")
    return ds


def _write_rows(path, header, rows) -> None:
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)


def _fmt(x) -> str:
    return f"{x:.6f}" if isinstance(x, float) else str(x)


def _log(quiet: bool):
    if quiet:
        return None

    def emit(row):
        ev = "" if row["eval_acc"] is None else f" eval_acc={row['eval_acc']:.4f}"
        print(f"epoch {row['epoch']:4d} lr={row['lr']:.5f} loss={row['train_loss']:.4f} "
              f"acc={row['train_acc']:.4f}{ev}", flush=True)
    return emit


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(args) -> int:
    from .analysis import count_params
    from .training import evaluate, fit, train_joint, write_metrics_csv

    cfg = _load_cfg(args)
    tcfg = cfg.train_config(args.seed)
    os.makedirs(args.out, exist_ok=True)
    if not args.joint:
        model = build_model(cfg, args.seed)
        rows = fit(model, load_data(cfg, "train"), load_data(cfg, "test"), tcfg, _log(args.quiet))
        write_metrics_csv(os.path.join(args.out, "metrics.csv"), rows)
        model.save(os.path.join(args.out, "model.ckpt"))
        model.save(os.path.join(args.out, "server.ckpt"), include_source=False)
        print(f"test accuracy {rows[-1]['eval_acc']}")
        return 0

    if cfg["data.source"] != "synthetic" or cfg["data.num_domains"] < 2:
        raise ConfigError("train --joint needs data.source = synthetic and data.num_domains >= 2")
    spec = cfg.synthetic_spec()
    domains = range(spec.num_domains)
    trains = [domain_dataset(spec, "train", d) for d in domains]
    tests = [domain_dataset(spec, "test", d) for d in domains]
    joint = build_model(cfg, args.seed, num_classes=sum(t.num_classes for t in trains))
    res = train_joint(joint, trains, tests, tcfg)
    write_metrics_csv(os.path.join(args.out, "metrics.csv"), res["history"])
    joint.save(os.path.join(args.out, "model.ckpt"))
    joint_params = count_params(joint, "prompt_source")
    rows = []
    indiv_total = 0
    for d in domains:
        indiv_acc = ""
        indiv_params = ""
        if args.with_individual:
            single = build_model(cfg, args.seed)
            fit(single, trains[d], None, replace(tcfg, eval_every=0))
            indiv_acc = _fmt(evaluate(single, tests[d]))
            indiv_params = count_params(single, "prompt_source")
            indiv_total += indiv_params
        rows.append([d, _fmt(res["per_dataset"][d]), indiv_acc, joint_params, indiv_params])
    _write_rows(os.path.join(args.out, "joint.csv"),
                ["domain", "joint_acc", "individual_acc", "joint_params", "individual_params"], rows)
    for r in rows:
        print(f"domain {r[0]}: joint {r[1]} individual {r[2] or '-'}")
    if indiv_total:
        print(f"trainable prompt-source params: joint {joint_params} vs individual total {indiv_total} "
              f"({joint_params / indiv_total:.1%})")
    return 0


def cmd_eval(args) -> int:
    from .training import evaluate

    cfg = _load_cfg(args)
    model = load_model(cfg, args.checkpoint)
    acc = evaluate(model, load_data(cfg, args.split))
    print(f"{args.split} accuracy {acc:.6f}")
    return 0


def cmd_invert(args) -> int:
    from .inversion import composite_for, get_inverter, verify_equivalence

    cfg = _load_cfg(args)
    model = load_model(cfg, args.checkpoint)
    if model.source is None:
        raise PGNError("checkpoint has no prompt source to invert")
    ds = load_data(cfg, "test")
    images = ds.images[:args.count]
    inv = get_inverter(model.enc)
    comp = composite_for(images, model.source, model.enc, inv)
    os.makedirs(args.out, exist_ok=True)
    np.save(os.path.join(args.out, "composites.npy"), comp.pixels)
    rows = []
    for i in range(len(images)):
        rows.append([i, f"{verify_equivalence(images[i:i + 1], model.source, model.enc, inv):.3e}"])
    f64 = verify_equivalence(images, model.source, model.enc, dtype=np.float64)
    rows.append(["all_float64", f"{f64:.3e}"])
    _write_rows(os.path.join(args.out, "equivalence.csv"), ["image", "max_abs_diff"], rows)
    worst = max(float(r[1]) for r in rows[:-1])
    print(f"composites {comp.pixels.shape}; max |dz| float32 {worst:.3e}, float64 {f64:.3e}")
    return 0


def cmd_serve(args) -> int:
    from .service import InferenceServer, serve

    cfg = _load_cfg(args)
    entries_cfg = cfg.encoder_config()
    server = InferenceServer.from_checkpoint(args.checkpoint, entries_cfg, cfg["data.num_classes"])
    endpoint = args.endpoint or cfg["serve.endpoint"]
    srv = serve(server, endpoint)
    host, port = srv.server_address[:2]
    print(f"listening on {host}:{port}", flush=True)
    try:
        srv.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        srv.server_close()
    return 0


def cmd_client(args) -> int:
    from . import tensor as T
    from .inversion import get_inverter
    from .service import SocketTransport, client_classify

    cfg = _load_cfg(args)
    model = load_model(cfg, args.checkpoint)
    ds = load_data(cfg, "test")
    inv = get_inverter(model.enc) if model.source is not None else None
    endpoint = args.endpoint or cfg["serve.endpoint"]
    rows = []
    worst = 0.0
    with SocketTransport(endpoint) as transport:
        for i in range(min(args.count, len(ds))):
            remote = client_classify(ds.images[i], model.source, inv, transport, cfg["serve.mode"], cfg["serve.crc"])
            with T.no_grad():
                local = model.logits(ds.images[i:i + 1]).data[0]
            diff = float(np.max(np.abs(remote - local)))
            worst = max(worst, diff)
            rows.append([i, int(ds.labels[i]), int(remote.argmax()), f"{diff:.3e}"])
    if args.out:
        _write_rows(args.out, ["index", "label", "prediction", "max_abs_diff_vs_local"], rows)
    acc = np.mean([r[1] == r[2] for r in rows])
    print(f"{len(rows)} images, remote accuracy {acc:.4f}, max |remote - local| {worst:.3e} ({cfg['serve.mode']})")
    return 0


def cmd_analyze(args) -> int:
    from . import analysis

    cfg = _load_cfg(args)
    if args.what == "params":
        feat = args.feat_dim
        if feat is None:
            from .generator import build_backbone
            feat = build_backbone(cfg["pgn.backbone"], cfg["pgn.input_resolution"]).feature_dim
        c = args.embed_dim or cfg["encoder.embed_dim"]
        table = analysis.head_param_table(feat, c, library_factor=args.library_factor)
        rows = [[r["k"], r["n"], r["tl_head"], r["direct_head"]] for r in table]
        _write_rows(args.out, ["k", "n", "tl_head_params", "direct_head_params"], rows)
        for r in rows:
            print(*r)
        return 0
    if not args.checkpoint:
        raise UsageError(f"analyze {args.what} needs --checkpoint")
    ds = load_data(cfg, "test")
    model = load_model(cfg, args.checkpoint[0])
    if args.what == "nmi":
        report = analysis.nmi_study(model, ds, seed=args.seed)
        report.to_csv(args.out)
        print(report.names)
        print(np.array2string(report.matrix, precision=4))
    elif args.what == "attention":
        rows = []
        for path in args.checkpoint:
            m = model if path == args.checkpoint[0] else load_model(cfg, path)
            hist = analysis.attention_histogram(m, ds, layer=args.layer, bins=args.bins)
            rows.append([path, f"{hist.across_image_variance:.6e}", f"{hist.variance:.6e}",
                         f"{hist.values.mean():.6f}"])
            hist.to_csv(os.path.splitext(args.out)[0] + f"_hist{len(rows) - 1}.csv")
        _write_rows(args.out, ["checkpoint", "across_image_variance", "variance", "mean"], rows)
        for r in rows:
            print(*r)
    elif args.what == "topk":
        idx, scores = analysis.token_topk(model, ds, args.token, args.m)
        _write_rows(args.out, ["rank", "index", "label", "score"],
                    [[i, int(j), int(ds.labels[j]), f"{s:.6f}"] for i, (j, s) in enumerate(zip(idx, scores))])
        print(f"top {len(idx)} images for token {args.token}: labels {ds.labels[idx].tolist()}")
    return 0


def cmd_ablate(args) -> int:
    from .analysis import count_params
    from .training import fit

    cfg = _load_cfg(args)
    tcfg = cfg.train_config(args.seed)
    train, test = load_data(cfg, "train"), load_data(cfg, "test")
    values = ABLATIONS[args.sweep]
    enc_cfg = cfg.encoder_config()
    # one frozen encoder for the whole sweep, with room for the largest K
    k_max = max(values) if args.sweep == "prompts" else cfg["pgn.prompts"]
    r_max = max(enc_cfg.r_max, math.ceil(k_max / enc_cfg.grid_w))
    rows = []
    for v in values:
        opts = {"prompts": {"k": v}, "library": {"n": v}, "backbone": {"backbone": v}}[args.sweep]
        model = build_model(cfg, args.seed, r_max=r_max, **opts)
        hist = fit(model, train, test, replace(tcfg, eval_every=0))
        src = model.source
        row = [args.sweep, v, src.k if src is not None else 0,
               getattr(getattr(src, "lib", None), "size", ""), opts.get("backbone", cfg["pgn.backbone"]),
               count_params(model, "total"), _fmt(hist[-1]["eval_acc"])]
        rows.append(row)
        print(*row, flush=True)
    _write_rows(args.out, ["sweep", "value", "k", "n", "backbone", "trainable_params", "test_acc"], rows)
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def make_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pgnet", description="Prompt generation networks for frozen vision transformers.",
                formatter_class=argparse.RawDescriptionHelpFormatter, epilog=registry_help())
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp, seed_required=False):
        sp.add_argument("--config", help="flat key = value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        if seed_required:
            sp.add_argument("--seed", type=int, required=True, help="seed for prompt source, classifier and shuffling")
        return sp

    sp = common(sub.add_parser("train", help="train a prompt source"), seed_required=True)
    sp.add_argument("--out", required=True, help="output directory (metrics.csv, model.ckpt, server.ckpt)")
    sp.add_argument("--joint", action="store_true", help="one model over all synthetic domains")
    sp.add_argument("--with-individual", action="store_true", help="with --joint: also train one model per domain")
    sp.add_argument("--quiet", action="store_true")
    sp.set_defaults(func=cmd_train)

    sp = common(sub.add_parser("eval", help="accuracy of a checkpoint"))
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--split", choices=("train", "test"), default="test")
    sp.set_defaults(func=cmd_eval)

    sp = common(sub.add_parser("invert", help="dump composite images and an equivalence report"))
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--count", type=int, default=100)
    sp.set_defaults(func=cmd_invert)

    sp = common(sub.add_parser("serve", help="host encoder + classifier (server.ckpt only)"))
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--endpoint")
    sp.set_defaults(func=cmd_serve)

    sp = common(sub.add_parser("client", help="classify test images through a server"))
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--endpoint")
    sp.add_argument("--count", type=int, default=100)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_client)

    sp = common(sub.add_parser("analyze", help="nmi | attention | topk | params"))
    sp.add_argument("what", choices=("nmi", "attention", "topk", "params"))
    sp.add_argument("--checkpoint", action="append", help="model checkpoint (repeat for attention comparison)")
    sp.add_argument("--out", required=True, help="CSV output path")
    sp.add_argument("--seed", type=int, default=0, help="k-means seed")
    sp.add_argument("--layer", type=int, default=-1)
    sp.add_argument("--bins", type=int, default=50)
    sp.add_argument("--token", type=int, default=0)
    sp.add_argument("--m", type=int, default=16)
    sp.add_argument("--feat-dim", type=int)
    sp.add_argument("--embed-dim", type=int)
    sp.add_argument("--library-factor", type=int, default=8)
    sp.set_defaults(func=cmd_analyze)

    sp = common(sub.add_parser("ablate", help="sweep prompts | library | backbone"), seed_required=True)
    sp.add_argument("sweep", choices=tuple(ABLATIONS))
    sp.add_argument("--out", required=True, help="CSV output path")
    sp.set_defaults(func=cmd_ablate)
    return p


def run(argv=None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required")
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"config error: {exc}\n\n{registry_help()}", file=sys.stderr)
        return 1
    except (PGNError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
