#!/usr/bin/env python3
"""Frozen CLIP encoders behind a JSON-lines pipe for the `real` CLIP backend.

Each stdin line is a request; each stdout line is the reply. Images arrive
already resized and normalised as planar 3 x S x S arrays.
"""

import argparse
import hashlib
import json
import sys

import numpy as np
import torch
from transformers import CLIPModel, CLIPTokenizer


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--model", default="openai/clip-vit-base-patch16")
    args = ap.parse_args()

    torch.set_grad_enabled(False)
    model = CLIPModel.from_pretrained(args.model).eval()
    tokenizer = CLIPTokenizer.from_pretrained(args.model)
    dim = model.config.projection_dim

    def checksum() -> str:
        h = hashlib.sha256()
        for name, t in sorted(model.state_dict().items()):
            h.update(name.encode())
            h.update(t.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()

    def unit(x: torch.Tensor) -> list:
        return torch.nn.functional.normalize(x.double(), dim=-1).tolist()

    for line in sys.stdin:
        line = line.strip()
        if not line:
            continue
        try:
            req = json.loads(line)
            op = req.get("op")
            if op == "info":
                reply = {"dim": dim, "model": args.model}
            elif op == "encode_images":
                s = int(req["size"])
                px = np.asarray(req["pixels"], dtype=np.float32).reshape(-1, 3, s, s)
                emb = model.get_image_features(pixel_values=torch.from_numpy(px))
                reply = {"embeddings": unit(emb)}
            elif op == "encode_texts":
                tok = tokenizer(req["texts"], padding=True, return_tensors="pt")
                reply = {"embeddings": unit(model.get_text_features(**tok))}
            elif op == "checksum":
                reply = {"checksum": checksum()}
            else:
                reply = {"error": f"unknown op {op!r}"}
        except Exception as e:  # every failure becomes an error reply
            reply = {"error": str(e)}
        sys.stdout.write(json.dumps(reply) + "\n")
        sys.stdout.flush()


if __name__ == "__main__":
    main()
