#!/usr/bin/env python3
"""Pretrained semantic backend for `selic`.

    semantic_backend.py caption IMAGE.png   # caption on stdout
    semantic_backend.py embed < caption.txt # pooled sentence vector on stdout

Point SELIC_SEMANTIC_CMD at this file to use it. Models are loaded from the
local Hugging Face cache; set SELIC_ALLOW_DOWNLOAD=1 to fetch them. Exit
status 3 means the models or their libraries are not available.
"""

import os
import sys

CAPTION_MODEL = os.environ.get("SELIC_CAPTION_MODEL", "Salesforce/blip-image-captioning-base")
TEXT_MODEL = os.environ.get("SELIC_TEXT_MODEL", "bert-base-uncased")
MAX_TOKENS = 64
UNAVAILABLE = 3


def unavailable(msg):
    print(msg, file=sys.stderr)
    sys.exit(UNAVAILABLE)


def load():
    try:
        import torch
        import transformers
    except ImportError as e:
        unavailable(f"missing python package: {e.name}")
    transformers.logging.set_verbosity_error()
    return torch, transformers


def local_only():
    return os.environ.get("SELIC_ALLOW_DOWNLOAD") != "1"


def caption(path):
    torch, tf = load()
    from PIL import Image

    try:
        processor = tf.BlipProcessor.from_pretrained(CAPTION_MODEL, local_files_only=local_only())
        model = tf.BlipForConditionalGeneration.from_pretrained(CAPTION_MODEL, local_files_only=local_only())
    except OSError as e:
        unavailable(f"captioning model {CAPTION_MODEL} not available: {e}")
    model.eval()
    image = Image.open(path).convert("RGB")
    inputs = processor(images=image, return_tensors="pt")
    with torch.no_grad():
        out = model.generate(**inputs, max_new_tokens=MAX_TOKENS, num_beams=1, do_sample=False)
    print(processor.decode(out[0], skip_special_tokens=True).strip())


def embed(text):
    torch, tf = load()
    try:
        tokenizer = tf.AutoTokenizer.from_pretrained(TEXT_MODEL, local_files_only=local_only())
        model = tf.AutoModel.from_pretrained(TEXT_MODEL, local_files_only=local_only())
    except OSError as e:
        unavailable(f"text model {TEXT_MODEL} not available: {e}")
    model.eval()
    tokens = tokenizer(text, return_tensors="pt", truncation=True, max_length=MAX_TOKENS + 2)
    with torch.no_grad():
        out = model(**tokens)
    # First-token pooled output.
    pooled = out.pooler_output if getattr(out, "pooler_output", None) is not None else out.last_hidden_state[:, 0]
    print(" ".join(f"{v:.9g}" for v in pooled[0].tolist()))


def main(argv):
    if len(argv) >= 3 and argv[1] == "caption":
        caption(argv[2])
    elif len(argv) == 2 and argv[1] == "embed":
        embed(sys.stdin.read().strip())
    else:
        print(__doc__, file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main(sys.argv))
