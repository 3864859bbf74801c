"""Command-line entry point: ``hctc <command> [<subcommand>] ...``.

Exit status is 0 on success, 1 for usage errors and 2 for data or contract
errors.  Failures print one line to stderr::

    hctc: error code=<code> reason=<message>

Training and decoding runs write a ``manifest.json`` recording the resolved
configuration, seeds, input hashes, artifact paths, tool version and argv.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import __version__
from .data import (
    SyntheticSpec,
    generate_synthetic,
    parse_text_matrices,
    read_feature_dir,
    write_feature_dir,
    write_posteriors,
)
from .decode import FusionConfig, fusion_beam_search, greedy_decode, write_hypotheses
from .errors import AlignmentError, ContractError, HctcError
from .eval import score_corpus
from .lm import lm_train, load_lm, perplexity, save_lm
from .model import (
    TopologyConfig,
    batch_posteriors,
    build_model,
    config_from_text,
    config_to_dict,
    config_to_text,
    load_checkpoint,
    model_input,
    prepare_examples,
    read_checkpoint_meta,
    save_checkpoint,
    stl_parity_config,
    topology_param_count,
    train,
)
from .units import (
    base_subword_units,
    bpe_inventory,
    build_coder,
    decode_units,
    encode_subwords,
    learn_bpe,
    load_coder,
    normalize_text,
    read_merges,
    read_transcripts,
    save_coder,
    write_inventory,
    write_merges,
    write_transcripts,
)


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    """argparse with usage errors mapped to exit status 1."""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _fmt():
    return argparse.ArgumentDefaultsHelpFormatter


# -- helpers -----------------------------------------------------------------------


def sha256_path(path):
    """Hex digest of a file, or of a directory's sorted (name, digest) listing."""
    p = Path(path)
    h = hashlib.sha256()
    if p.is_dir():
        for child in sorted(p.iterdir()):
            if child.is_file():
                h.update(child.name.encode())
                h.update(sha256_path(child).encode())
        return h.hexdigest()
    with open(p, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(path, argv, config, seeds, inputs, artifacts):
    manifest = {
        "tool": "hctc",
        "tool_version": __version__,
        "argv": list(argv),
        "config": config,
        "seeds": seeds,
        "inputs": {str(k): {"path": str(v), "sha256": sha256_path(v)} for k, v in inputs.items()},
        "artifacts": {k: str(v) for k, v in artifacts.items()},
    }
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def _read_lines(path):
    if path in (None, "-"):
        return sys.stdin.read().splitlines()
    return Path(path).read_text(encoding="utf-8").splitlines()


def _write_lines(path, lines):
    text = "".join(line + "\n" for line in lines)
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(path).write_text(text, encoding="utf-8")


def _split_id(line):
    """``utt<TAB>payload`` -> (utt, payload); plain lines have no id."""
    if "\t" in line:
        utt, rest = line.split("\t", 1)
        return utt, rest
    return None, line


def _join_id(utt, payload):
    return payload if utt is None else f"{utt}\t{payload}"


def _emit(**pairs):
    for k, v in pairs.items():
        print(f"{k}={v}")


# -- bpe -------------------------------------------------------------------------


def cmd_bpe_learn(args):
    corpus = [normalize_text(_split_id(line)[1]) for line in _read_lines(args.corpus)]
    corpus = [t for t in corpus if t]
    merges = learn_bpe(corpus, args.ops)
    write_merges(args.out, merges)
    inventory = bpe_inventory(base_subword_units(corpus), merges)
    if args.inventory:
        write_inventory(args.inventory, inventory)
    _emit(merges=len(merges), requested=args.ops, units=len(inventory), out=args.out)


def cmd_bpe_apply(args):
    merges = read_merges(args.merges)
    out = []
    for line in _read_lines(args.input):
        utt, text = _split_id(line)
        out.append(_join_id(utt, " ".join(encode_subwords(normalize_text(text), merges))))
    _write_lines(args.output, out)


def cmd_bpe_invert(args):
    out = []
    for line in _read_lines(args.input):
        utt, units = _split_id(line)
        out.append(_join_id(utt, decode_units(units.split(), character_level=args.chars)))
    _write_lines(args.output, out)


# -- features / synth --------------------------------------------------------------


def cmd_features_convert(args):
    text = Path(args.input).read_text(encoding="utf-8")
    mats = parse_text_matrices(text, default_id=args.utt_id or Path(args.input).stem)
    write_feature_dir(args.out_dir, mats)
    _emit(utterances=len(mats), out_dir=args.out_dir)


def cmd_synth_generate(args):
    spec = SyntheticSpec(
        alphabet_size=args.alphabet,
        noise=args.noise,
        seed=args.seed,
        feature_dim=args.feature_dim,
        successors=args.successors,
    )
    out = Path(args.out)
    pairs = generate_synthetic(spec, args.n_utts, start=args.start)
    write_feature_dir(out / "feats", [fm for fm, _ in pairs])
    write_transcripts(out / "text.tsv", {fm.utt_id: t for fm, t in pairs})
    _emit(utterances=len(pairs), features=out / "feats", transcripts=out / "text.tsv")


# -- train -------------------------------------------------------------------------


def _load_corpus(feature_dir, transcript_path, lowercase=True):
    feats = read_feature_dir(feature_dir)
    trans = read_transcripts(transcript_path, lowercase=lowercase)
    missing = set(feats) - set(trans)
    if missing:
        raise AlignmentError(missing, ())
    if not feats:
        raise ContractError(f"{feature_dir}: no .feat files")
    return feats, trans


def _resolve_config(args, feature_dim):
    cfg = TopologyConfig()
    if args.config:
        cfg = config_from_text(Path(args.config).read_text(), cfg)
    overrides = {
        "topology": args.topology,
        "heads": tuple(args.heads.split(",")) if args.heads else None,
        "epochs": args.epochs,
        "learning_rate": args.learning_rate,
        "seed": args.seed,
        "hidden": args.hidden,
        "projection": args.projection,
        "head_hidden": args.head_hidden,
        "batch_size": args.batch_size,
        "init_scale": args.init_scale,
    }
    cfg = dataclasses.replace(cfg, **{k: v for k, v in overrides.items() if v is not None})
    return dataclasses.replace(cfg, input_dim=feature_dim * cfg.subsample)


def cmd_train(args):
    from .plotting import plot_loss_curve

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    feats, trans = _load_corpus(args.features, args.transcripts)
    F = next(iter(feats.values())).F
    cfg = _resolve_config(args, F)
    texts = [trans[u] for u in feats]
    if cfg.topology == "stl" and args.match:
        mtl = dataclasses.replace(cfg, topology=args.match)
        mtl.validate()
        coders = {h: build_coder(h, texts) for h in mtl.heads}
        cfg, delta = stl_parity_config(mtl, coders, head=mtl.heads[-1])
        coders = {cfg.heads[0]: coders[cfg.heads[0]]}
    else:
        cfg.validate()
        coders = {h: build_coder(h, texts) for h in cfg.heads}
        delta = None
    cfg.validate()
    model = build_model(cfg, coders)
    examples = prepare_examples(
        {u: fm.values for u, fm in feats.items()}, {u: trans[u] for u in feats}, coders, cfg
    )
    log_rows = []

    def report(epoch, loss):
        log_rows.append((epoch + 1, loss))
        if args.verbose:
            print(f"epoch={epoch + 1} loss={loss:.6f}", file=sys.stderr)

    history = train(model, examples, callback=report)

    units_dir = out / "units"
    for coder in coders.values():
        save_coder(units_dir, coder)
    ckpt = out / "model.ckpt"
    save_checkpoint(ckpt, model)
    (out / "config.txt").write_text(config_to_text(cfg))
    log = out / "train_log.tsv"
    log.write_text("epoch\tloss\n" + "".join(f"{e}\t{v:.10g}\n" for e, v in log_rows))
    curve = plot_loss_curve(history, out / "loss_curve.png", title=f"{cfg.topology} {','.join(cfg.heads)}")
    artifacts = {"checkpoint": ckpt, "units": units_dir, "config": out / "config.txt",
                 "train_log": log, "loss_curve": curve}
    write_manifest(
        out / "manifest.json", ["hctc", *args.argv], config_to_dict(cfg),
        {"model": cfg.seed, "batch_order": cfg.seed + 1},
        {"features": args.features, "transcripts": args.transcripts},
        artifacts,
    )
    _emit(params=model.n_params, parity_delta="none" if delta is None else delta,
          examples=len(examples), final_loss=f"{history[-1]:.6f}" if history else "nan",
          checkpoint=ckpt, manifest=out / "manifest.json")


# -- lm ----------------------------------------------------------------------------


def _coder_from_dir(model_dir, head):
    return load_coder(Path(model_dir) / "units", head)


def cmd_lm_train(args):
    coder = _coder_from_dir(args.model_dir, args.head)
    texts = [normalize_text(_split_id(line)[1]) for line in _read_lines(args.text)]
    corpus = [coder.encode(t) for t in texts if t]
    lm = lm_train(
        corpus, coder.inventory.n_labels, backend=args.backend,
        inventory_hash=coder.inventory.hash, order=args.order, alpha=args.alpha,
        hidden=args.hidden, epochs=args.epochs, seed=args.seed,
    )
    save_lm(args.out, lm)
    _emit(backend=args.backend, head=args.head, sequences=len(corpus),
          perplexity=f"{perplexity(lm, corpus):.4f}", out=args.out)


# -- decode ------------------------------------------------------------------------

_WORKER = {}


def _init_worker(lm, cfg, coder):
    _WORKER.update(lm=lm, cfg=cfg, coder=coder)


def _fusion_one(post):
    w = _WORKER
    return w["coder"].decode(fusion_beam_search(post, w["lm"], w["cfg"], w["coder"].inventory))


def cmd_decode(args):
    meta = read_checkpoint_meta(Path(args.model_dir) / "model.ckpt")
    heads = meta["config"]["heads"]
    head = args.head or heads[-1]
    if head not in heads:
        raise ContractError(f"checkpoint has no head {head!r}; heads are {heads}")
    coder = _coder_from_dir(args.model_dir, head)
    model = load_checkpoint(Path(args.model_dir) / "model.ckpt", {head: coder})
    feats = read_feature_dir(args.features)
    utts = list(feats)
    inputs = [model_input(feats[u].values, model.config) for u in utts]
    posts = [p[head] for p in batch_posteriors(model, inputs, heads=[head])]
    if args.dump_posteriors:
        d = Path(args.dump_posteriors)
        d.mkdir(parents=True, exist_ok=True)
        for u, p in zip(utts, posts):
            write_posteriors(d / f"{u}.post", p)
    inputs_used = {"checkpoint": Path(args.model_dir) / "model.ckpt", "features": args.features}
    if args.mode == "greedy":
        hyps = [coder.decode(greedy_decode(p)) for p in posts]
        fusion = None
    else:
        if not args.lm:
            raise UsageError("decode: --mode fusion requires --lm")
        lm = load_lm(args.lm)
        fusion = FusionConfig(args.beam, args.bonus, args.lm_weight, args.repeat_lm).validate()
        inputs_used["lm"] = args.lm
        if args.jobs > 1:
            with ProcessPoolExecutor(args.jobs, initializer=_init_worker,
                                     initargs=(lm, fusion, coder)) as pool:
                hyps = list(pool.map(_fusion_one, posts))
        else:
            _init_worker(lm, fusion, coder)
            hyps = [_fusion_one(p) for p in posts]
    out = Path(args.out)
    write_hypotheses(out, dict(zip(utts, hyps)))
    manifest = out.with_name(out.name + ".manifest.json")
    write_manifest(
        manifest, ["hctc", *args.argv],
        {"mode": args.mode, "head": head, "fusion": dataclasses.asdict(fusion) if fusion else None,
         "model": meta["config"]},
        {"model": meta["config"]["seed"]}, inputs_used, {"hypotheses": out},
    )
    _emit(mode=args.mode, head=head, utterances=len(utts), out=out, manifest=manifest)


# -- score / inspect --------------------------------------------------------------------


def _read_id_text(path):
    out = {}
    for lineno, line in enumerate(_read_lines(path), 1):
        if not line.strip():
            continue
        utt, text = _split_id(line)
        if utt is None:
            utt, _, text = line.partition(" ")
        out[utt] = normalize_text(text)
    return out


def cmd_score(args):
    refs = _read_id_text(args.ref)
    hyps = _read_id_text(args.hyp)
    total, per_utt = score_corpus(refs, hyps, args.granularity, per_utterance=True)
    prefix = "wer" if args.granularity == "word" else "cer"
    sys.stdout.write(total.key_values(prefix))
    if args.per_utt:
        for utt, eb in per_utt.items():
            print(f"utt={utt}\terrors={eb.errors}\tref={eb.ref_len}")
    if args.figure:
        from .plotting import plot_error_breakdown

        label = args.label or Path(args.hyp).stem
        plot_error_breakdown({label: total}, args.figure, title=f"{prefix.upper()} breakdown")
        print(f"figure={args.figure}")


def cmd_inspect_checkpoint(args):
    meta = read_checkpoint_meta(args.checkpoint)
    cfg = TopologyConfig(**meta["config"])
    _emit(
        version=meta["version"],
        tool_version=meta["tool_version"],
        topology=cfg.topology,
        heads=",".join(cfg.heads),
        head_sizes=",".join(f"{h}:{meta['head_sizes'][h]}" for h in cfg.heads),
        params=topology_param_count(cfg, meta["head_sizes"]),
        tensors=len(meta["tensors"]),
    )
    for h, digest in meta["inventory_hashes"].items():
        print(f"inventory[{h}]={digest}")
    if args.tensors:
        for name, shape in meta["tensors"]:
            print(f"tensor\t{name}\t{'x'.join(map(str, shape))}")


# -- parser ----------------------------------------------------------------------------


def build_parser():
    p = Parser(prog="hctc", description="Hierarchical multitask CTC speech recognition toolkit.",
               formatter_class=_fmt())
    p.add_argument("--version", action="version", version=f"hctc {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=Parser)

    bpe = sub.add_parser("bpe", help="learn, apply and invert BPE unit sets", formatter_class=_fmt())
    bsub = bpe.add_subparsers(dest="action", required=True, parser_class=Parser)
    b = bsub.add_parser("learn", help="learn a merge table", formatter_class=_fmt())
    b.add_argument("--corpus", required=True, help="text, one sentence per line (utt<TAB>text accepted)")
    b.add_argument("--ops", type=int, required=True, help="number of merge operations")
    b.add_argument("--out", required=True, help="merge table output")
    b.add_argument("--inventory", help="also write the unit inventory (blank first)")
    b.set_defaults(func=cmd_bpe_learn)
    b = bsub.add_parser("apply", help="segment text into subword units", formatter_class=_fmt())
    b.add_argument("--merges", required=True, help="merge table from 'bpe learn'")
    b.add_argument("--input", default="-", help="text lines (utt<TAB>text accepted); '-' reads stdin")
    b.add_argument("--output", default="-", help="'-' writes stdout")
    b.set_defaults(func=cmd_bpe_apply)
    b = bsub.add_parser("invert", help="units back to text", formatter_class=_fmt())
    b.add_argument("--input", default="-", help="space-separated unit lines; '-' reads stdin")
    b.add_argument("--output", default="-", help="'-' writes stdout")
    b.add_argument("--chars", action="store_true",
                   help="input is space-free character units (no word boundaries)")
    b.set_defaults(func=cmd_bpe_invert)

    feat = sub.add_parser("features", help="feature file utilities", formatter_class=_fmt())
    fsub = feat.add_subparsers(dest="action", required=True, parser_class=Parser)
    f = fsub.add_parser("convert", help="text matrices to binary .feat files", formatter_class=_fmt())
    f.add_argument("--input", required=True, help="bare matrix or Kaldi-style 'utt [ ... ]' text")
    f.add_argument("--out-dir", required=True, help="directory for <utt>.feat files")
    f.add_argument("--utt-id", help="id for a bare matrix (default: input file stem)")
    f.set_defaults(func=cmd_features_convert)

    syn = sub.add_parser("synth", help="synthetic corpus", formatter_class=_fmt())
    ssub = syn.add_subparsers(dest="action", required=True, parser_class=Parser)
    s = ssub.add_parser("generate", help="write feats/ and text.tsv", formatter_class=_fmt())
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--n-utts", type=int, default=350, help="number of utterances")
    s.add_argument("--start", type=int, default=0, help="index of the first utterance")
    s.add_argument("--seed", type=int, default=0, help="PCG64 seed for templates, lexicon and utterances")
    s.add_argument("--alphabet", type=int, default=8, help="number of symbols")
    s.add_argument("--feature-dim", type=int, default=16, help="feature dimension F")
    s.add_argument("--noise", type=float, default=0.1, help="Gaussian noise std per feature")
    s.add_argument("--successors", type=int, default=3,
                   help="allowed next words per word in the word Markov chain; 0 = independent words")
    s.set_defaults(func=cmd_synth_generate)

    t = sub.add_parser("train", help="train an STL/BMTL/HMTL model", formatter_class=_fmt())
    t.add_argument("--features", required=True, help="directory of .feat files")
    t.add_argument("--transcripts", required=True, help="utt<TAB>text file")
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--config", help="key = value config file; flags below override it")
    t.add_argument("--topology", choices=["stl", "bmtl", "hmtl"], help="default from config: hmtl")
    t.add_argument("--heads", help="comma list, fine to coarse (e.g. char,s300,s1k,s10k)")
    t.add_argument("--match", choices=["bmtl", "hmtl"],
                   help="with --topology stl: size the STL model to this MTL's parameter count "
                        "on --heads and train the last head")
    t.add_argument("--epochs", type=int, help="passes over the augmented data (20)")
    t.add_argument("--learning-rate", type=float, help="plain SGD step size (default 0.05)")
    t.add_argument("--seed", type=int, help="init seed; batch order uses seed+1")
    t.add_argument("--hidden", type=int, help="shared/cascade BiLSTM cells per direction (320)")
    t.add_argument("--projection", type=int, help="projection width between shared layers (340)")
    t.add_argument("--head-hidden", type=int, help="head BiLSTM cells per direction (320)")
    t.add_argument("--batch-size", type=int, help="utterances per length-sorted batch (16)")
    t.add_argument("--init-scale", type=float, help="uniform init range (0.05)")
    t.add_argument("--verbose", action="store_true", help="per-epoch loss on stderr")
    t.set_defaults(func=cmd_train)

    lm = sub.add_parser("lm", help="unit language models", formatter_class=_fmt())
    lsub = lm.add_subparsers(dest="action", required=True, parser_class=Parser)
    m = lsub.add_parser("train", help="train a unit LM for one head", formatter_class=_fmt())
    m.add_argument("--model-dir", required=True, help="training output directory (for units/)")
    m.add_argument("--head", required=True, help="head whose unit inventory the LM uses")
    m.add_argument("--text", required=True, help="LM training text (utt<TAB>text accepted)")
    m.add_argument("--out", required=True, help="LM output file")
    m.add_argument("--backend", choices=["ngram", "lstm"], default="ngram",
                   help="add-alpha n-gram (closed form) or 2-layer unidirectional LSTM")
    m.add_argument("--order", type=int, default=3, help="n-gram order")
    m.add_argument("--alpha", type=float, default=0.1, help="add-alpha smoothing")
    m.add_argument("--hidden", type=int, default=256, help="LSTM LM cells per layer")
    m.add_argument("--epochs", type=int, default=10, help="LSTM LM epochs")
    m.add_argument("--seed", type=int, default=0, help="LSTM LM init and batch-order seed")
    m.set_defaults(func=cmd_lm_train)

    d = sub.add_parser("decode", help="greedy or shallow-fusion decoding", formatter_class=_fmt())
    d.add_argument("--model-dir", required=True, help="training output directory")
    d.add_argument("--features", required=True, help="directory of .feat files")
    d.add_argument("--out", required=True, help="hypothesis file (utt<TAB>text)")
    d.add_argument("--head", help="head to decode (default: coarsest)")
    d.add_argument("--mode", choices=["greedy", "fusion"], default="greedy",
                   help="per-frame argmax then squash, or prefix beam search with LM fusion")
    d.add_argument("--lm", help="LM file from 'hctc lm train' (fusion)")
    d.add_argument("--beam", type=int, default=40, help="prefix beam width")
    d.add_argument("--bonus", type=float, default=1.5, help="insertion bonus b per emitted unit")
    d.add_argument("--lm-weight", type=float, default=1.0, help="LM probability exponent")
    d.add_argument("--repeat-lm", action="store_true",
                   help="also apply the LM factor and bonus on frames repeating the previous label")
    d.add_argument("--jobs", type=int, default=1, help="decoding processes (output is order-stable)")
    d.add_argument("--dump-posteriors", help="directory for per-utterance log-posterior dumps")
    d.set_defaults(func=cmd_decode)

    sc = sub.add_parser("score", help="pooled WER/CER", formatter_class=_fmt())
    sc.add_argument("--ref", required=True, help="reference utt<TAB>text file")
    sc.add_argument("--hyp", required=True, help="hypothesis utt<TAB>text file")
    sc.add_argument("--granularity", choices=["word", "char"], default="word",
                    help="char strips spaces before comparison")
    sc.add_argument("--per-utt", action="store_true", help="also print per-utterance counts")
    sc.add_argument("--figure", help="write an error-breakdown bar chart (PNG)")
    sc.add_argument("--label", help="system label for the figure")
    sc.set_defaults(func=cmd_score)

    ins = sub.add_parser("inspect", help="inspect artifacts", formatter_class=_fmt())
    isub = ins.add_subparsers(dest="action", required=True, parser_class=Parser)
    c = isub.add_parser("checkpoint", help="print checkpoint metadata", formatter_class=_fmt())
    c.add_argument("checkpoint", help="model.ckpt path")
    c.add_argument("--tensors", action="store_true", help="list tensor names and shapes")
    c.set_defaults(func=cmd_inspect_checkpoint)
    return p


def _one_line(msg):
    return " ".join(str(msg).split())


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        args.argv = argv
        args.func(args)
    except UsageError as exc:
        print(f"hctc: error code=usage reason={_one_line(exc)}", file=sys.stderr)
        return 1
    except HctcError as exc:
        print(f"hctc: error code={exc.code} reason={_one_line(exc)}", file=sys.stderr)
        return 2
    except (OSError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        print(f"hctc: error code=io reason={_one_line(exc)}", file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help / --version
        return exc.code or 0
    return 0


if __name__ == "__main__":
    sys.exit(main())
