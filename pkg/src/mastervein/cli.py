"""Command-line entry point wiring corpora, systems, attacks, and reports
into reproducible runs.

Every subcommand writes a ``manifest.json`` capturing its full configuration
(no timestamps or absolute paths, so identical configs and seeds produce
byte-identical artifact directories).  A ``--config`` JSON file may supply
defaults; explicit flags override it.  Exit codes: 0 success, 1 usage error,
2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _write_manifest(out_dir: Path, command: str, params: dict) -> None:
    payload = {"command": command, "version": __version__, "params": params}
    (out_dir / "manifest.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _load_corpus(path: str):
    from .generators import load_corpus

    return load_corpus(path)


def _load_templates(enroll_dir):
    from .miura import load_pattern

    enroll_dir = Path(enroll_dir)
    manifest = json.loads((enroll_dir / "manifest.json").read_text())
    templates = []
    for name in manifest["params"]["templates"]:
        ident = name.split("__")[0]
        templates.append((ident, load_pattern(enroll_dir / name)))
    return templates


def _build_system(args, corpus):
    from .evaluation import CnnSystem, MiuraSystem
    from .neural import CnnModel, load_weights

    templates = None
    if getattr(args, "enroll", None):
        templates = _load_templates(args.enroll)
    if args.system == "miura-full":
        return MiuraSystem(corpus, mode="full", sigma=args.sigma, templates=templates)
    if args.system == "miura-partial":
        return MiuraSystem(corpus, mode="partial", sigma=args.sigma, templates=templates)
    if args.system == "cnn":
        if not args.model:
            raise UsageError("--model is required for the cnn system")
        model = load_weights(args.model)
        if not isinstance(model, CnnModel):
            raise UsageError(f"{args.model} does not contain a CNN matcher")
        return CnnSystem(corpus, model)
    raise UsageError(f"unknown system {args.system!r}")


def _system_rng(args):
    return np.random.default_rng(args.seed)


# ---------------------------------------------------------------------------
# subcommand handlers


def cmd_gen_corpus(args):
    from .generators import build_corpus, save_corpus

    corpus = build_corpus(args.ids, args.samples, jitter=args.jitter, seed=args.seed)
    out = Path(args.out)
    save_corpus(corpus, out)
    # extend the corpus manifest with the command record rather than shadowing it
    manifest = json.loads((out / "manifest.json").read_text())
    manifest["command"] = "gen-corpus"
    manifest["version"] = __version__
    manifest["params"] = {
        "ids": args.ids,
        "samples": args.samples,
        "jitter": args.jitter,
        "seed": args.seed,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(f"corpus with {corpus.n_identities} identities written to {out}")
    return 0


def cmd_enroll(args):
    from .miura import max_curvature, save_pattern

    corpus = _load_corpus(args.corpus)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for rec in corpus.identities:
        for k, img in enumerate(rec.enroll):
            pattern = max_curvature(img, rec.mask, args.sigma)
            name = f"{rec.identity}__{k}.pgm"
            save_pattern(pattern, out / name)
            files.append(name)
    _write_manifest(
        out,
        "enroll",
        {"corpus": Path(args.corpus).name, "sigma": args.sigma, "templates": files},
    )
    print(f"enrolled {len(files)} templates to {out}")
    return 0


def cmd_calibrate(args):
    from .evaluation import calibrate_threshold, compute_far, compute_frr
    from .reporting import write_score_csv

    corpus = _load_corpus(args.corpus)
    system = _build_system(args, corpus)
    rng = _system_rng(args)
    rows, probe_ids, genuine, impostor = [], [], [], []
    for rec in corpus.identities:
        for k, img in enumerate(rec.probe):
            probe_ids.append(f"{rec.identity}/{k}")
            scores = system.scores(img, rec.mask, rng=rng)
            rows.append(scores)
            for tid, v in zip(system.template_ids, scores):
                (genuine if tid == rec.identity else impostor).append(float(v))
    threshold = calibrate_threshold(genuine, impostor)
    far = compute_far(impostor, threshold)
    frr = compute_frr(genuine, threshold)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    payload = {
        "system": system.name,
        "threshold": threshold,
        "far": far,
        "frr": frr,
        "eer": 0.5 * (far + frr),
        "genuine_count": len(genuine),
        "impostor_count": len(impostor),
        "seed": args.seed,
    }
    (out / "calibration.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    write_score_csv(out / "scores.csv", system.template_ids, probe_ids, rows)
    _write_manifest(
        out,
        "calibrate",
        {"corpus": Path(args.corpus).name, "system": args.system, "seed": args.seed},
    )
    print(f"threshold {threshold:.6f} (FAR {far:.4f}, FRR {frr:.4f}) written to {out}")
    return 0


def cmd_train_cnn(args):
    from .neural import save_weights, train_cnn

    corpus = _load_corpus(args.corpus)
    images, labels = [], []
    for k, rec in enumerate(corpus.identities):
        for img in rec.enroll + rec.probe:
            images.append(img)
            labels.append(k)
    model, history = train_cnn(
        images,
        labels,
        corpus.n_identities,
        epochs=args.epochs,
        lr=args.lr,
        margin=args.margin,
        scale=args.scale,
        rng=np.random.default_rng(args.seed),
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_weights(model, out / "cnn.vfw1")
    with open(out / "training_curve.csv", "w") as fh:
        fh.write("epoch,loss,accuracy\n")
        for e, (l, a) in enumerate(zip(history["epoch_loss"], history["epoch_accuracy"])):
            fh.write(f"{e},{l!r},{a!r}\n")
    _write_manifest(
        out,
        "train-cnn",
        {
            "corpus": Path(args.corpus).name,
            "identities": [rec.identity for rec in corpus.identities],
            "epochs": args.epochs,
            "lr": args.lr,
            "margin": args.margin,
            "scale": args.scale,
            "seed": args.seed,
            "final_accuracy": history["epoch_accuracy"][-1],
        },
    )
    print(f"model written to {out/'cnn.vfw1'} (final accuracy {history['epoch_accuracy'][-1]:.3f})")
    return 0


def _make_generator(args):
    from .generators import ProceduralGenerator, neural_generator
    from .neural import DecoderNet, load_weights

    if args.decoder:
        decoder = load_weights(args.decoder)
        if not isinstance(decoder, DecoderNet):
            raise UsageError(f"{args.decoder} does not contain a decoder")
        return neural_generator(decoder)
    return ProceduralGenerator()


def cmd_attack_lve(args):
    from .attacks import LveConfig, lve_run, raw_sample_run
    from .imaging import save_image
    from .reporting import plot_attack_trace

    corpus = _load_corpus(args.corpus)
    system = _build_system(args, corpus)
    cfg = LveConfig(
        generator=_make_generator(args),
        matcher=system,
        iterations=args.iters,
        population=args.pop,
        seed=args.seed,
        threads=args.threads,
    )
    runner = raw_sample_run if args.strategy == "random" else lve_run
    result = runner(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_image(result.best_image, out / "master.pgm")
    with open(out / "trace.csv", "w") as fh:
        fh.write("generation,best_score\n")
        for g, s in enumerate(result.best_scores):
            fh.write(f"{g},{s!r}\n")
    plot_attack_trace(out / "trace.png", result.best_scores)
    _write_manifest(
        out,
        "attack-lve",
        {
            "corpus": Path(args.corpus).name,
            "system": args.system,
            "strategy": args.strategy,
            "iterations": args.iters,
            "population": args.pop,
            "generator": "decoder" if args.decoder else "procedural",
            "decoder": Path(args.decoder).name if args.decoder else None,
            "seed": args.seed,
            "best_score": result.best_score,
        },
    )
    print(f"master vein (score {result.best_score:.4f}) written to {out}")
    return 0


def _attack_config(args, mask):
    from .attacks import AttackConfig
    from .imaging import make_kernel

    kernel = make_kernel(args.kernel, args.kernel_size, args.kernel_sigma)
    return AttackConfig(
        epsilon=args.eps,
        alpha=args.alpha,
        iterations=args.iters,
        kernel=kernel,
        mask=mask,
        k=args.k,
        mode=args.target_mode,
        recompute_targets=args.recompute_targets,
        seed=args.seed,
    )


def _load_model(path):
    from .neural import CnnModel, load_weights

    model = load_weights(path)
    if not isinstance(model, CnnModel):
        raise UsageError(f"{path} does not contain a CNN matcher")
    return model


def _probe_mask(args, image):
    from .imaging import EmptyMaskError, estimate_finger_mask, load_mask

    if args.mask:
        return load_mask(args.mask)
    try:
        return estimate_finger_mask(image)
    except EmptyMaskError:
        # bright low-contrast inputs: threshold at their own intensity midpoint
        lo, hi = float(image.pixels.min()), float(image.pixels.max())
        return estimate_finger_mask(image, threshold=0.5 * (lo + hi))


def cmd_attack_adv(args):
    from .attacks import build_target_vector, pgd_attack, target_mass
    from .imaging import load_image, save_image
    from .neural import predict_probs
    from .reporting import plot_loss_trace

    model = _load_model(args.model)
    x0 = load_image(args.input)
    mask = _probe_mask(args, x0)
    cfg = _attack_config(args, mask)
    rng = np.random.default_rng(args.seed)
    if args.target_mode == "top":
        y = build_target_vector(model.n_classes, args.k, "top", class_probs=predict_probs(model, x0))
    else:
        y = build_target_vector(model.n_classes, args.k, "random", rng=rng)
    before = target_mass(model, x0, y)
    result = pgd_attack(model, x0, y, cfg)
    after = target_mass(model, result.image, result.target)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_image(result.image, out / "adversarial.pgm")
    with open(out / "loss_trace.csv", "w") as fh:
        fh.write("iteration,loss\n")
        for t, l in enumerate(result.losses):
            fh.write(f"{t},{l!r}\n")
    plot_loss_trace(out / "loss_trace.png", result.losses)
    _write_manifest(
        out,
        "attack-adv",
        {
            "model": Path(args.model).name,
            "input": Path(args.input).name,
            "eps": args.eps,
            "alpha": cfg.alpha,
            "iterations": args.iters,
            "kernel": args.kernel,
            "kernel_size": args.kernel_size,
            "kernel_sigma": args.kernel_sigma,
            "k": args.k,
            "target_mode": args.target_mode,
            "target_support": [int(i) for i in result.target.support],
            "target_mass_before": before,
            "target_mass_after": after,
            "unchanged": bool(np.array_equal(result.image.pixels, x0.pixels)),
            "seed": args.seed,
        },
    )
    print(f"adversarial probe written to {out} (target mass {before:.4f} -> {after:.4f})")
    return 0


def cmd_attack_combined(args):
    from .attacks import AttackConfig, LveResult, combined_attack, target_mass
    from .imaging import load_image, save_image
    from .reporting import plot_loss_trace

    model = _load_model(args.model)
    lve_dir = Path(args.lve)
    master = load_image(lve_dir / "master.pgm")
    lve_manifest = json.loads((lve_dir / "manifest.json").read_text())
    lve = LveResult(
        best_image=master,
        best_score=lve_manifest["params"]["best_score"],
        history=[(master, lve_manifest["params"]["best_score"])],
    )
    mask = _probe_mask(args, master)
    cfg = _attack_config(args, mask)
    result = combined_attack(lve, model, cfg)
    before = target_mass(model, master, result.pgd.target)
    after = target_mass(model, result.image, result.pgd.target)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_image(result.image, out / "combined.pgm")
    with open(out / "loss_trace.csv", "w") as fh:
        fh.write("iteration,loss\n")
        for t, l in enumerate(result.pgd.losses):
            fh.write(f"{t},{l!r}\n")
    plot_loss_trace(out / "loss_trace.png", result.pgd.losses)
    _write_manifest(
        out,
        "attack-combined",
        {
            "model": Path(args.model).name,
            "lve": lve_dir.name,
            "eps": args.eps,
            "alpha": cfg.alpha,
            "iterations": args.iters,
            "kernel": args.kernel,
            "k": args.k,
            "target_mode": args.target_mode,
            "target_mass_before": before,
            "target_mass_after": after,
            "seed": args.seed,
        },
    )
    print(f"combined master vein written to {out} (target mass {before:.4f} -> {after:.4f})")
    return 0


def cmd_sweep_topk(args):
    from .attacks import topk_sweep
    from .evaluation import CnnSystem, calibrate_threshold, score_matrix
    from .imaging import load_image
    from .reporting import plot_topk_fars, write_sweep_csv

    model = _load_model(args.model)
    corpus = _load_corpus(args.corpus)
    system = CnnSystem(corpus, model)
    genuine, impostor = score_matrix(system)
    threshold = calibrate_threshold(genuine, impostor)
    x0 = load_image(args.input)
    mask = _probe_mask(args, x0)
    cfg = _attack_config(args, mask)
    fractions = [float(f) for f in args.fractions.split(",") if f]
    rows = topk_sweep(model, x0, fractions, cfg, system, threshold, rng=np.random.default_rng(args.seed))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_sweep_csv(out / "sweep.csv", rows)
    if rows:
        plot_topk_fars(out / "sweep.png", rows)
    _write_manifest(
        out,
        "sweep-topk",
        {
            "model": Path(args.model).name,
            "corpus": Path(args.corpus).name,
            "input": Path(args.input).name,
            "fractions": fractions,
            "threshold": threshold,
            "seed": args.seed,
        },
    )
    print(f"top-k sweep over {len(rows)} fractions written to {out}")
    return 0


def cmd_eval(args):
    from .evaluation import evaluate_system
    from .imaging import load_image

    corpus = _load_corpus(args.corpus)
    system = _build_system(args, corpus)
    masters = {}
    for spec in args.master or []:
        if "=" not in spec:
            raise UsageError(f"--master expects name=path, got {spec!r}")
        name, path = spec.split("=", 1)
        masters[name] = load_image(path)
    report = evaluate_system(system, masters=masters, seed=args.seed, threads=args.threads)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json() + "\n")
    _write_manifest(
        out,
        "eval",
        {
            "corpus": Path(args.corpus).name,
            "system": args.system,
            "masters": sorted(masters),
            "seed": args.seed,
        },
    )
    print(f"evaluation report written to {out/'report.json'}")
    for name, far in report.master_fars.items():
        print(f"  {name}: FAR {far:.4f} (bona fide impostor FAR {report.impostor_far:.4f})")
    return 0


def cmd_report(args):
    from .evaluation import EvalReport
    from .imaging import load_image
    from .reporting import (
        format_far_table,
        plot_attack_trace,
        plot_image_grid,
        plot_topk_fars,
        write_far_table_csv,
    )

    reports = [EvalReport.from_json(Path(p).read_text()) for p in args.eval]
    out = Path(args.out)
    figures = out / "figures"
    figures.mkdir(parents=True, exist_ok=True)
    write_far_table_csv(out / "far_table.csv", reports)
    table = format_far_table(reports)
    (out / "far_table.txt").write_text(table)
    if args.lve:
        import csv as _csv

        with open(Path(args.lve) / "trace.csv") as fh:
            scores = [float(row["best_score"]) for row in _csv.DictReader(fh)]
        plot_attack_trace(figures / "lve_trace.png", scores)
    if args.sweep:
        import csv as _csv

        with open(args.sweep) as fh:
            rows = [
                {"fraction": float(r["fraction"]), "far": float(r["far"])}
                for r in _csv.DictReader(fh)
            ]
        plot_topk_fars(figures / "topk_fars.png", rows)
    if args.image:
        images = {}
        for spec in args.image:
            if "=" not in spec:
                raise UsageError(f"--image expects name=path, got {spec!r}")
            name, path = spec.split("=", 1)
            images[name] = load_image(path)
        plot_image_grid(figures / "probes.png", images)
    _write_manifest(
        out,
        "report",
        {"evals": [Path(p).name for p in args.eval], "figures": sorted(p.name for p in figures.iterdir())},
    )
    print(table, end="")
    print(f"report written to {out}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> _Parser:
    parser = _Parser(prog="mastervein", description=__doc__)
    parser.add_argument("--config", help="JSON file with default parameter values")
    sub = parser.add_subparsers(dest="command", required=True)

    from .parallel import default_threads

    def add(name, fn, **kwargs):
        p = sub.add_parser(name, **kwargs)
        p.set_defaults(handler=fn)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument(
            "--threads", type=int, default=default_threads(),
            help="internal parallelism cap (env MASTERVEIN_THREADS)",
        )
        return p

    p = add("gen-corpus", cmd_gen_corpus, help="generate a procedural vein corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--ids", type=int, default=20)
    p.add_argument("--samples", type=int, default=8)
    p.add_argument("--jitter", type=float, default=0.15)

    p = add("enroll", cmd_enroll, help="extract and store enrollment vein patterns")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--sigma", type=float, default=3.0)

    def add_system_flags(p):
        p.add_argument("--system", default="miura-full", choices=["miura-full", "miura-partial", "cnn"])
        p.add_argument("--sigma", type=float, default=3.0)
        p.add_argument("--model", help="VFW1 weights for the cnn system")
        p.add_argument("--enroll", help="enroll directory with precomputed vein patterns")

    p = add("calibrate", cmd_calibrate, help="compute the EER threshold of a system")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    add_system_flags(p)

    p = add("train-cnn", cmd_train_cnn, help="train the CNN matcher on a corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--lr", type=float, default=0.02)
    p.add_argument("--margin", type=float, default=0.5)
    p.add_argument("--scale", type=float, default=16.0)

    p = add("attack-lve", cmd_attack_lve, help="evolve a master vein against a system")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--iters", type=int, default=40)
    p.add_argument("--pop", type=int, default=18)
    p.add_argument("--strategy", default="cmaes", choices=["cmaes", "random"])
    p.add_argument("--decoder", help="VFW1 decoder weights; default procedural generator")
    add_system_flags(p)

    def add_adv_flags(p):
        p.add_argument("--eps", type=float, default=16.0 / 255.0)
        p.add_argument("--alpha", type=float, default=None)
        p.add_argument("--iters", type=int, default=100)
        p.add_argument("--kernel", default="gaussian", choices=["gaussian", "lowpass", "highpass", "laplacian", "dirac"])
        p.add_argument("--kernel-size", type=int, default=5)
        p.add_argument("--kernel-sigma", type=float, default=1.0)
        p.add_argument("--k", type=float, default=0.05)
        p.add_argument("--target-mode", default="top", choices=["top", "random"])
        p.add_argument("--recompute-targets", action="store_true")
        p.add_argument("--mask", help="mask PGM; default estimated from the input")

    p = add("attack-adv", cmd_attack_adv, help="filtered k-label gradient attack on the CNN")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    add_adv_flags(p)

    p = add("attack-combined", cmd_attack_combined, help="gradient attack on an evolved master vein")
    p.add_argument("--model", required=True)
    p.add_argument("--lve", required=True, help="attack-lve output directory")
    p.add_argument("--out", required=True)
    add_adv_flags(p)

    p = add("sweep-topk", cmd_sweep_topk, help="attack at several top-k fractions and measure FARs")
    p.add_argument("--model", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--fractions", default="0.05,0.2,0.4,0.6")
    add_adv_flags(p)

    p = add("eval", cmd_eval, help="calibrate a system and measure master FARs")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--master", action="append", help="name=path of a master probe (repeatable)")
    add_system_flags(p)

    p = add("report", cmd_report, help="FAR tables and figures from evaluation artifacts")
    p.add_argument("--eval", action="append", required=True, help="report.json path (repeatable)")
    p.add_argument("--lve", help="attack-lve output directory for the trace figure")
    p.add_argument("--sweep", help="sweep.csv path for the top-k figure")
    p.add_argument("--image", action="append", help="name=path probe image for the grid figure")
    p.add_argument("--out", required=True)

    return parser


def _apply_config_defaults(parser, argv):
    """--config JSON supplies defaults; explicit flags override them."""
    if "--config" not in argv:
        return argv
    idx = argv.index("--config")
    cfg_path = argv[idx + 1]
    defaults = json.loads(Path(cfg_path).read_text())
    rest = argv[:idx] + argv[idx + 2 :]
    if not rest:
        raise UsageError("--config given but no subcommand")
    out = [rest[0]]
    for key, value in defaults.items():
        flag = "--" + key.replace("_", "-")
        if flag not in rest:
            out += [flag, str(value)]
    return out + rest[1:]


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        argv = _apply_config_defaults(parser, argv)
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    try:
        return args.handler(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure contract: exit code 2
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
