"""Command-line entry point: ``camo <subcommand> [flags]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .checkpoint import load_checkpoint, save_checkpoint
from .data import (
    build_vocab,
    load_manifest,
    load_vocab,
    read_features,
    reference_idf,
    save_manifest,
    save_vocab,
    split_dataset,
    synth_features,
    write_features,
)
from .heatmap import HeatmapSpec, grid_scores, read_ppm, render_attention_map, write_ppm
from .metrics import CiderD, evaluate
from .model import CaptionModel, ModelConfig
from .sweep import ablation_sweep, write_sweep_csv
from .training import JsonlLogger, TrainConfig, evaluate_model, make_examples, perturb_parameters, train_scst, train_xe

log = logging.getLogger("camo")


class CliError(RuntimeError):
    pass


# -- helpers --------------------------------------------------------------------


def _float_list(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


class PreparedData:
    """A directory written by ``prepare``."""

    def __init__(self, root):
        self.root = Path(root)
        meta_path = self.root / "dataset.json"
        if not meta_path.exists():
            raise CliError(f"{self.root} is not a prepared data directory (no dataset.json)")
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
        features = Path(meta["features"])
        self.features_path = features if features.is_absolute() else self.root / features
        self.vocab, self.idf = load_vocab(self.root / "vocab.json")
        self._features = None

    def manifest(self, split: str):
        return load_manifest(self.root / f"{split}.json")

    @property
    def features(self):
        if self._features is None:
            self._features = read_features(self.features_path)
        return self._features

    @property
    def d_feat(self) -> int:
        return next(iter(self.features.values())).shape[1]


def _model_config(values: dict, data: PreparedData, alpha=None, beta=None, no_camo=False) -> ModelConfig:
    mc = cfgmod.build(ModelConfig, values, d_feat=data.d_feat, vocab_size=len(data.vocab), alpha=alpha, beta=beta)
    if no_camo:
        mc.camo = False
    return mc


def _data_dir(args, values) -> PreparedData:
    root = args.data or values.get("data")
    if not root:
        raise CliError("no data directory: pass --data or set data= in the config")
    return PreparedData(root)


# -- subcommands ----------------------------------------------------------------


def cmd_prepare(args) -> None:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.synth:
        feats, manifest = synth_features(args.seed, args.synth, args.synth_t, args.synth_d, args.captions_per_image)
        manifest_path, features_path = out / "manifest.json", out / "features.cvff"
        save_manifest(manifest, manifest_path)
        write_features(features_path, feats)
    else:
        if not args.manifest or not args.features:
            raise CliError("prepare needs --manifest and --features (or --synth N)")
        manifest = load_manifest(args.manifest)
        features_path = Path(args.features).resolve()
        feats = read_features(features_path)
    missing = [img.feature_key for img in manifest.images if img.feature_key not in feats]
    if missing:
        raise CliError(f"{len(missing)} images have no features, e.g. {missing[0]!r}")
    train, val, test = split_dataset(manifest, args.seed, args.val_ratio, args.test_ratio)
    for name, part in (("train", train), ("val", val), ("test", test)):
        save_manifest(part, out / f"{name}.json")
    vocab = build_vocab(train, args.min_freq)
    save_vocab(out / "vocab.json", vocab, reference_idf(train))
    feat_ref = features_path.name if features_path.parent.resolve() == out.resolve() else str(features_path)
    (out / "dataset.json").write_text(json.dumps({"features": feat_ref}) + "\n", encoding="utf-8")
    print(f"train={len(train.images)} val={len(val.images)} test={len(test.images)} vocab={len(vocab)}")


def _run_xe(values, data: PreparedData, seed, alpha=None, beta=None, no_camo=False, epochs=None, log_path=None):
    mc = _model_config(values, data, alpha, beta, no_camo)
    tc = cfgmod.build(TrainConfig, values, stage="xe", seed=seed, epochs=epochs, alpha=mc.alpha, beta=mc.beta)
    model = CaptionModel(mc, seed=seed)
    examples = make_examples(data.manifest("train"), data.features, data.vocab, mc.max_len)
    logger = JsonlLogger(log_path)
    try:
        train_xe(model, examples, tc, logger)
    finally:
        logger.close()
    return model, tc, logger


def cmd_train_xe(args) -> None:
    values = cfgmod.load_config(args.config)
    cfgmod.check_keys(values)
    data = _data_dir(args, values)
    seed = cfgmod.resolve_seed(args.seed, values)
    model, tc, logger = _run_xe(values, data, seed, args.alpha, args.beta, args.no_camo, args.epochs, args.log)
    save_checkpoint(args.checkpoint, model, {"stage": "xe", "vocab": data.vocab.itos, "seed": seed})
    print(f"final loss {logger.records[-1].loss:.6f} after {len(logger.records)} iterations")


def cmd_train_scst(args) -> None:
    values = cfgmod.load_config(args.config)
    cfgmod.check_keys(values)
    data = _data_dir(args, values)
    seed = cfgmod.resolve_seed(args.seed, values)
    model, meta = load_checkpoint(args.init)
    if args.alpha is not None:
        model.enc_config.alpha = model.config.alpha = args.alpha
    if args.beta is not None:
        model.enc_config.beta = model.config.beta = args.beta
    noise = float(values.get("noise", 0.0)) if args.noise is None else args.noise
    if noise:
        perturb_parameters(model, noise, seed)
    defaults = {"epochs": "10", "schedule": "step", "lr": "5e-6"}
    tc = cfgmod.build(TrainConfig, {**defaults, **values}, stage="scst", seed=seed, epochs=args.epochs)
    iterations = args.iterations if args.iterations is not None else (int(values["iterations"]) if "iterations" in values else None)
    examples = make_examples(data.manifest("train"), data.features, data.vocab, model.config.max_len)
    metric = data.idf or reference_idf(data.manifest("train"))
    logger = JsonlLogger(args.log)
    try:
        results = train_scst(model, examples, tc, metric, data.vocab.itos, logger, iterations)
    finally:
        logger.close()
    save_checkpoint(args.checkpoint, model, {"stage": "scst", "vocab": meta.get("vocab", data.vocab.itos), "seed": seed})
    if results:
        print(f"{len(results)} SCST steps, last mean reward {results[-1].mean_reward:.4f}")


def _image_features(args):
    feats = read_features(args.features)
    if args.manifest:
        manifest = load_manifest(args.manifest)
        return [(img.id, img.feature_key, feats[img.feature_key]) for img in manifest.images]
    return [(i, key, mat) for i, (key, mat) in enumerate(feats.items())]


def cmd_caption(args) -> None:
    model, meta = load_checkpoint(args.checkpoint)
    itos = meta["vocab"]
    preds = []
    for image_id, key, mat in _image_features(args):
        mat = mat.astype(np.float64)
        res = model.greedy(mat, itos=itos) if args.beam == 1 else model.beam(mat, args.beam, itos=itos)
        preds.append({"image_id": image_id, "feature_key": key, "caption": res.text})
    text = json.dumps(preds, ensure_ascii=False, indent=1) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def cmd_eval(args) -> None:
    preds_doc = json.loads(Path(args.predictions).read_text(encoding="utf-8"))
    if isinstance(preds_doc, dict):
        preds_doc = preds_doc.get("annotations", [])
    preds = {int(p["image_id"]): p["caption"] for p in preds_doc}
    refs = load_manifest(args.references).captions_by_image()
    idf = None
    if args.idf:
        _, idf = load_vocab(args.idf)
        if idf is None:
            raise CliError(f"{args.idf} carries no IDF table")
    report = evaluate(preds, refs, idf)
    text = report.to_json()
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    sys.stdout.write(text)


def cmd_sweep(args) -> None:
    values = cfgmod.load_config(args.config)
    cfgmod.check_keys(values)
    data = _data_dir(args, values)
    seed = cfgmod.resolve_seed(args.seed, values)
    val = make_examples(data.manifest(args.split), data.features, data.vocab, int(values.get("max_len", ModelConfig.max_len)))
    metric = CiderD.from_references([ex.refs for ex in val])

    def train_fn(alpha, beta, s):
        return _run_xe(values, data, s, alpha, beta, epochs=args.epochs)[0]

    def eval_fn(model):
        return evaluate_model(model, val, data.vocab.itos, metric)[0]

    cells = ablation_sweep(args.alphas, args.betas, train_fn, eval_fn, seed)
    write_sweep_csv(args.out, cells)
    print(Path(args.out).read_text(encoding="utf-8"), end="")


def cmd_attnmap(args) -> None:
    model, meta = load_checkpoint(args.checkpoint)
    feats = read_features(args.features)
    key = args.key or next(iter(feats))
    if key not in feats:
        raise CliError(f"no features for key {key!r}")
    res = model.greedy(feats[key].astype(np.float64), itos=meta["vocab"])
    image = read_ppm(args.image)
    steps = range(len(res.attention)) if args.step == "all" else [int(args.step)]
    out = Path(args.out)
    for k in steps:
        if not 0 <= k < len(res.attention):
            raise CliError(f"step {k} out of range; caption has {len(res.attention)} steps")
        rendered = render_attention_map(HeatmapSpec(grid_scores(res.attention[k]), image, args.blend))
        path = out if args.step != "all" else out.with_name(f"{out.stem}_step{k}{out.suffix}")
        write_ppm(path, rendered)
    print(res.text)


# -- parser ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="camo", description="CAMO image-captioning toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, train=False):
        sp.add_argument("--seed", type=int, default=None, help="overrides config seed and $CAMO_SEED")
        if train:
            sp.add_argument("--config", default=None, help="key=value config file")
            sp.add_argument("--data", default=None, help="directory written by 'prepare'")
            sp.add_argument("--alpha", type=float, default=None)
            sp.add_argument("--beta", type=float, default=None)
            sp.add_argument("--epochs", type=int, default=None)

    sp = sub.add_parser("prepare", help="split a dataset, build vocabulary and IDF table")
    common(sp)
    sp.add_argument("--manifest")
    sp.add_argument("--features")
    sp.add_argument("--out", required=True)
    sp.add_argument("--min-freq", type=int, default=1)
    sp.add_argument("--val-ratio", type=float, default=0.15)
    sp.add_argument("--test-ratio", type=float, default=0.15)
    sp.add_argument("--synth", type=int, default=0, metavar="N", help="generate N synthetic images instead")
    sp.add_argument("--synth-t", type=int, default=4)
    sp.add_argument("--synth-d", type=int, default=16)
    sp.add_argument("--captions-per-image", type=int, default=1)
    sp.set_defaults(func=cmd_prepare)

    sp = sub.add_parser("train-xe", help="cross-entropy training")
    common(sp, train=True)
    sp.add_argument("--checkpoint", required=True, help="output checkpoint")
    sp.add_argument("--log", default=None, help="JSON-lines training log")
    sp.add_argument("--no-camo", action="store_true", help="vanilla encoder without CAMO parameters")
    sp.set_defaults(func=cmd_train_xe)

    sp = sub.add_parser("train-scst", help="self-critical fine-tuning with CIDEr-D reward")
    common(sp, train=True)
    sp.add_argument("--init", required=True, help="XE checkpoint to start from")
    sp.add_argument("--checkpoint", required=True, help="output checkpoint")
    sp.add_argument("--log", default=None)
    sp.add_argument("--iterations", type=int, default=None)
    sp.add_argument("--noise", type=float, default=None, help="std of Gaussian noise added to the init weights")
    sp.set_defaults(func=cmd_train_scst)

    sp = sub.add_parser("caption", help="generate captions")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--features", required=True)
    sp.add_argument("--manifest", default=None, help="restrict to (and id by) this manifest")
    sp.add_argument("--beam", type=int, default=3)
    sp.add_argument("--out", default=None)
    sp.set_defaults(func=cmd_caption)

    sp = sub.add_parser("eval", help="score predictions against references")
    common(sp)
    sp.add_argument("--predictions", required=True)
    sp.add_argument("--references", required=True, help="manifest JSON")
    sp.add_argument("--idf", default=None, help="vocab.json carrying a frozen IDF table")
    sp.add_argument("--out", default=None)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("sweep", help="alpha/beta ablation grid")
    common(sp, train=True)
    sp.add_argument("--alphas", type=_float_list, required=True)
    sp.add_argument("--betas", type=_float_list, required=True)
    sp.add_argument("--split", default="val")
    sp.add_argument("--out", default="sweep.csv")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("attnmap", help="render cross-attention heatmaps")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--image", required=True, help="binary PPM (P6)")
    sp.add_argument("--features", required=True)
    sp.add_argument("--key", default=None, help="feature key (default: first in file)")
    sp.add_argument("--out", required=True)
    sp.add_argument("--blend", type=float, default=0.3)
    sp.add_argument("--step", default="0", help="decoding step index or 'all'")
    sp.set_defaults(func=cmd_attnmap)
    return p


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "seed", 0) is None and args.command == "prepare":
        args.seed = cfgmod.resolve_seed(None, {})
    try:
        args.func(args)
    except (OSError, ValueError, KeyError, RuntimeError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
