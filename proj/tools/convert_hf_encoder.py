#!/usr/bin/env python3
"""Convert a BERT-layout checkpoint (BERT, ELECTRA discriminator) into a
fewvuln model directory: config.json, vocab.txt, weights.bin.

    convert_hf_encoder.py SOURCE OUT_DIR

SOURCE is anything transformers can load with AutoModel (a local directory
or a hub name). The classifier head is not converted; fewvuln initialises a
fresh one from the run seed.
"""

import argparse
import json
import struct
import sys
from pathlib import Path

MAGIC = b"FVWTS01\n"


def tensor_map(state, layers):
    # fewvuln name -> (source name, transpose)
    out = {}

    def put(dst, src, t=False):
        out[dst] = (src, t)

    for n in ("word", "position", "token_type"):
        put(f"embeddings.{n}_embeddings.weight", f"embeddings.{n}_embeddings.weight")
    put("embeddings.LayerNorm.weight", "embeddings.LayerNorm.weight")
    put("embeddings.LayerNorm.bias", "embeddings.LayerNorm.bias")
    for i in range(layers):
        p = f"encoder.layer.{i}."
        for part in ("attention.self.query", "attention.self.key", "attention.self.value",
                     "attention.output.dense", "intermediate.dense", "output.dense"):
            put(p + part + ".weight", p + part + ".weight", True)
            put(p + part + ".bias", p + part + ".bias")
        for ln in ("attention.output.LayerNorm", "output.LayerNorm"):
            put(p + ln + ".weight", p + ln + ".weight")
            put(p + ln + ".bias", p + ln + ".bias")
    missing = [src for src, _ in out.values() if src not in state]
    if missing:
        sys.exit(f"checkpoint lacks {missing[0]} (not a BERT-layout encoder?)")
    return out


def write_weights(path, tensors):
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors:
            if arr.ndim == 1:
                arr = arr.reshape(1, -1)
            raw = name.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack("<II", arr.shape[0], arr.shape[1]))
            f.write(arr.astype("<f4", copy=False).tobytes(order="C"))


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("source")
    ap.add_argument("out")
    ap.add_argument("--name", help="encoder name recorded in config.json (default: SOURCE)")
    args = ap.parse_args()

    from transformers import AutoConfig, AutoModel, AutoTokenizer

    cfg = AutoConfig.from_pretrained(args.source)
    if getattr(cfg, "embedding_size", cfg.hidden_size) != cfg.hidden_size:
        sys.exit("embedding_size differs from hidden_size; projected embeddings are not supported")
    if getattr(cfg, "position_embedding_type", "absolute") != "absolute":
        sys.exit("only absolute position embeddings are supported")
    if getattr(cfg, "hidden_act", "gelu") != "gelu":
        sys.exit(f"activation {cfg.hidden_act} is not supported (exact gelu only)")
    tok = AutoTokenizer.from_pretrained(args.source)
    if getattr(tok, "do_lower_case", False):
        sys.exit("tokenizer lowercases its input; fewvuln keeps case, use a cased checkpoint")

    model = AutoModel.from_pretrained(args.source)
    model.eval()
    state = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    mapping = tensor_map(state, cfg.num_hidden_layers)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tensors = []
    for dst, (src, transpose) in mapping.items():
        a = state[src]
        tensors.append((dst, a.T.copy() if transpose else a))
    write_weights(out / "weights.bin", tensors)

    vocab = tok.get_vocab()
    pieces = [None] * len(vocab)
    for piece, idx in vocab.items():
        pieces[idx] = piece
    if any(p is None for p in pieces):
        sys.exit("tokenizer vocabulary has gaps")
    (out / "vocab.txt").write_text("".join(p + "\n" for p in pieces), encoding="utf-8")

    conf = {
        "vocab_size": len(pieces),
        "hidden_size": cfg.hidden_size,
        "num_hidden_layers": cfg.num_hidden_layers,
        "num_attention_heads": cfg.num_attention_heads,
        "intermediate_size": cfg.intermediate_size,
        "max_position_embeddings": cfg.max_position_embeddings,
        "type_vocab_size": cfg.type_vocab_size,
        "num_labels": 3,
        "layer_norm_eps": cfg.layer_norm_eps,
        "hidden_dropout_prob": cfg.hidden_dropout_prob,
        "attention_probs_dropout_prob": cfg.attention_probs_dropout_prob,
        "initializer_range": cfg.initializer_range,
        "encoder_name": args.name or args.source,
        "has_classifier": False,
        "split_punctuation": True,
        "labels": ["SN", "SV", "O"],
    }
    if conf["vocab_size"] != cfg.vocab_size:
        print(f"note: tokenizer has {conf['vocab_size']} pieces, config says {cfg.vocab_size}", file=sys.stderr)
        if conf["vocab_size"] > cfg.vocab_size:
            sys.exit("tokenizer vocabulary is larger than the embedding table")
        # pad the piece list so ids line up with embedding rows
        pieces += [f"[unused-{i}]" for i in range(cfg.vocab_size - len(pieces))]
        (out / "vocab.txt").write_text("".join(p + "\n" for p in pieces), encoding="utf-8")
        conf["vocab_size"] = cfg.vocab_size
    (out / "config.json").write_text(json.dumps(conf, indent=2) + "\n")
    print(f"wrote {out} ({len(tensors)} tensors, vocab {conf['vocab_size']})")


if __name__ == "__main__":
    main()
