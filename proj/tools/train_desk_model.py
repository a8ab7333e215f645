#!/usr/bin/env python3
"""Train the tiny byte-level desk model used by the test suite.

The architecture mirrors the C++ engine exactly (pre-norm RMSNorm, NeoX-style
rotary embeddings, SwiGLU MLP, untied unembedding) so the exported archive can
be loaded by kvprobe without conversion. Training data is a synthetic corpus of
short chat turns about a handful of concepts plus neutral filler text.

Usage:
    python tools/train_desk_model.py --out tests/data/desk_model.kvt
"""

import argparse
import json
import math
import random
import struct
import time

import torch
import torch.nn as nn
import torch.nn.functional as F

MAGIC = b"KVPTARC1"

CONCEPTS = {
    "cats": [
        "The cat sat on the mat.",
        "Cats purr when they are happy.",
        "My cat naps in the sun all day.",
        "A small cat chased a mouse.",
        "The cat drank milk and then the cat slept.",
        "Cats have soft fur and long whiskers.",
        "Every cat loves a warm lap.",
        "The kitten and the old cat play.",
    ],
    "bread": [
        "The bread is warm from the oven.",
        "I bake bread with flour and yeast.",
        "Fresh bread smells good in the morning.",
        "We slice the bread for toast.",
        "The baker sells bread and rolls.",
        "A loaf of bread sits on the table.",
    ],
    "love": [
        "Love is patient and kind.",
        "They love each other very much.",
        "I love my family and my friends.",
        "Love makes the heart feel full.",
        "A song about love and longing.",
        "We share our love every day.",
    ],
    "fear": [
        "Fear grips the heart in the dark.",
        "I fear the storm outside.",
        "The child felt fear at night.",
        "Fear makes the hands shake.",
        "We face our fear and move on.",
        "A cold fear crept in slowly.",
    ],
    "death": [
        "Death comes to every living thing.",
        "The old tree faced death in winter.",
        "They spoke of death and loss.",
        "Death is the end of a life.",
        "After death the leaves fall.",
        "A quiet death in the night.",
    ],
    "truth": [
        "The truth is always worth telling.",
        "She told the truth in court.",
        "Truth and honesty go together.",
        "We search for the truth.",
        "The plain truth was clear.",
        "Speak the truth and be free.",
    ],
    "creativity": [
        "Creativity turns ideas into art.",
        "Her creativity shines in every painting.",
        "Play sparks creativity in children.",
        "Creativity needs time and freedom.",
        "A burst of creativity filled the room.",
        "We value creativity and new ideas.",
    ],
    "programming": [
        "Programming is writing code for computers.",
        "I enjoy programming in the evening.",
        "The program has a bug in the loop.",
        "Programming needs logic and patience.",
        "We write code and test the program.",
        "A compiler turns code into a program.",
    ],
    "music": [
        "Music fills the hall with sound.",
        "I play music on the piano.",
        "The band plays loud music tonight.",
        "Music and song lift the spirit.",
        "She hums the music softly.",
        "We dance when the music starts.",
    ],
}

NEUTRAL = [
    "The day is long and the road is quiet.",
    "We walk to the shop and back.",
    "The weather is mild today.",
    "There is a chair near the window.",
    "The train leaves at noon.",
    "I read a book in the afternoon.",
    "The river runs past the town.",
    "We met at the station.",
    "The door is open and the room is bright.",
    "A bus stops at the corner.",
    "The wall is painted white.",
    "He writes a letter to a friend.",
]

USER_ASKS = [
    "Please think about {c} while you answer.",
    "Think about {c}.",
    "Tell me a story and think about {c}.",
    "Say something while you think about {c}.",
]

NEUTRAL_ASKS = [
    "Please think about anything while you answer.",
    "Think about anything.",
    "Tell me something.",
    "Say something.",
    "Tell me a story.",
]

PREFIXES = ["Sure,", "Okay.", "Well,", "Here goes:", "Alright.", "Of course.", "Yes,", "Hmm,"]

QUESTIONS_YES = ["Is the sky blue?", "Is water wet?", "Do cats purr?", "Is bread food?"]
QUESTIONS_NO = ["Is fire cold?", "Do fish walk?", "Is the sun dark?", "Can stones sing?"]


def chat(user, assistant):
    return "U: " + user + "\nA: " + assistant + "\n"


def sample_text(rng):
    r = rng.random()
    if r < 0.55:
        concept = rng.choice(list(CONCEPTS))
        ask = rng.choice(USER_ASKS).format(c=concept)
        body = " ".join(rng.choice(CONCEPTS[concept]) for _ in range(rng.randint(2, 4)))
        return chat(ask, rng.choice(PREFIXES) + " " + body)
    if r < 0.85:
        # Open-ended asks usually get neutral text, but sometimes drift onto a concept, so
        # the topic is a choice the model makes rather than something copied from the ask.
        ask = rng.choice(NEUTRAL_ASKS)
        pool = CONCEPTS[rng.choice(list(CONCEPTS))] if rng.random() < 0.3 else NEUTRAL
        body = " ".join(rng.choice(pool) for _ in range(rng.randint(2, 4)))
        return chat(ask, rng.choice(PREFIXES) + " " + body)
    if rng.random() < 0.5:
        return chat(rng.choice(QUESTIONS_YES), "The answer is yes.")
    return chat(rng.choice(QUESTIONS_NO), "The answer is no.")


def build_corpus(rng, n_bytes):
    parts = []
    total = 0
    while total < n_bytes:
        t = sample_text(rng)
        parts.append(t)
        total += len(t)
    return "".join(parts).encode("utf-8")


def rope(x, theta):
    # x: [B, H, T, hd]
    hd = x.shape[-1]
    half = hd // 2
    pos = torch.arange(x.shape[2], dtype=torch.float32)
    inv = theta ** (-torch.arange(half, dtype=torch.float32) * 2.0 / hd)
    ang = pos[:, None] * inv[None, :]
    cos, sin = ang.cos(), ang.sin()
    x1, x2 = x[..., :half], x[..., half:]
    return torch.cat([x1 * cos - x2 * sin, x2 * cos + x1 * sin], dim=-1)


class RMSNorm(nn.Module):
    def __init__(self, d, eps):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(d))
        self.eps = eps

    def forward(self, x):
        return x * torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + self.eps) * self.weight


class Block(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        d, ff = cfg["d_model"], cfg["ffn_dim"]
        self.cfg = cfg
        self.attn_norm = RMSNorm(d, cfg["norm_epsilon"])
        self.mlp_norm = RMSNorm(d, cfg["norm_epsilon"])
        self.wq = nn.Parameter(torch.randn(d, d) * d ** -0.5)
        self.wk = nn.Parameter(torch.randn(d, d) * d ** -0.5)
        self.wv = nn.Parameter(torch.randn(d, d) * d ** -0.5)
        self.wo = nn.Parameter(torch.randn(d, d) * d ** -0.5 / 2)
        self.w_gate = nn.Parameter(torch.randn(d, ff) * d ** -0.5)
        self.w_up = nn.Parameter(torch.randn(d, ff) * d ** -0.5)
        self.w_down = nn.Parameter(torch.randn(ff, d) * ff ** -0.5 / 2)

    def forward(self, x):
        B, T, d = x.shape
        H, hd = self.cfg["n_heads"], self.cfg["head_dim"]
        h = self.attn_norm(x)
        q = (h @ self.wq).view(B, T, H, hd).transpose(1, 2)
        k = (h @ self.wk).view(B, T, H, hd).transpose(1, 2)
        v = (h @ self.wv).view(B, T, H, hd).transpose(1, 2)
        q, k = rope(q, self.cfg["rope_theta"]), rope(k, self.cfg["rope_theta"])
        a = F.scaled_dot_product_attention(q, k, v, is_causal=True)
        x = x + a.transpose(1, 2).reshape(B, T, d) @ self.wo
        h = self.mlp_norm(x)
        return x + (F.silu(h @ self.w_gate) * (h @ self.w_up)) @ self.w_down


class DeskModel(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        d, V = cfg["d_model"], cfg["vocab_size"]
        self.tok_embeddings = nn.Parameter(torch.randn(V, d) * 0.5)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg["n_layers"]))
        self.final_norm = RMSNorm(d, cfg["norm_epsilon"])
        self.unembed = nn.Parameter(torch.randn(d, V) * d ** -0.5)

    def forward(self, idx):
        x = self.tok_embeddings[idx]
        for b in self.blocks:
            x = b(x)
        return self.final_norm(x) @ self.unembed


def export(model, cfg, path, meta):
    tensors = {"tok_embeddings": model.tok_embeddings, "final_norm": model.final_norm.weight,
               "unembed": model.unembed}
    for i, b in enumerate(model.blocks):
        p = f"layers.{i}."
        tensors[p + "attn_norm"] = b.attn_norm.weight
        tensors[p + "mlp_norm"] = b.mlp_norm.weight
        for n in ["wq", "wk", "wv", "wo", "w_gate", "w_up", "w_down"]:
            tensors[p + n] = getattr(b, n)
    header = {"format_version": 1, "metadata": {"config": cfg, **meta}, "tensors": {}}
    blobs = []
    offset = 0
    for name in sorted(tensors):
        t = tensors[name].detach().contiguous().float()
        raw = t.numpy().astype("<f4").tobytes()
        header["tensors"][name] = {"dtype": "f32", "shape": list(t.shape), "offset": offset}
        blobs.append(raw)
        offset += len(raw)
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(hb)))
        f.write(hb)
        for b in blobs:
            f.write(b)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="tests/data/desk_model.kvt")
    ap.add_argument("--reference", default="tests/data/desk_reference.json")
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=1234)
    args = ap.parse_args()

    torch.manual_seed(args.seed)
    torch.set_num_threads(1)
    rng = random.Random(args.seed)
    cfg = {"n_layers": 4, "d_model": 96, "n_heads": 4, "head_dim": 24, "ffn_dim": 256,
           "vocab_size": 256, "max_seq_len": 1024, "norm_epsilon": 1e-5,
           "positional_scheme": "rotary", "rope_theta": 10000.0}
    data = torch.tensor(list(build_corpus(rng, 2_000_000)), dtype=torch.long)
    model = DeskModel(cfg)
    opt = torch.optim.AdamW(model.parameters(), lr=3e-3, weight_decay=0.01)
    seq, batch = 256, 16
    t0 = time.time()
    for step in range(args.steps):
        lr = 3e-3 * 0.5 * (1 + math.cos(math.pi * step / args.steps))
        for g in opt.param_groups:
            g["lr"] = lr
        ix = torch.randint(0, len(data) - seq - 1, (batch,))
        x = torch.stack([data[i:i + seq] for i in ix])
        y = torch.stack([data[i + 1:i + seq + 1] for i in ix])
        loss = F.cross_entropy(model(x).reshape(-1, cfg["vocab_size"]), y.reshape(-1))
        opt.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), 1.0)
        opt.step()
        if step % 100 == 0 or step == args.steps - 1:
            print(f"step {step} loss {loss.item():.4f} ({time.time() - t0:.0f}s)", flush=True)

    export(model, cfg, args.out, {"trainer": "train_desk_model.py", "seed": args.seed,
                                  "steps": args.steps, "final_loss": float(loss.item())})

    # Reference logits for a fixed prompt, used to cross-check the C++ forward pass.
    prompt = "U: Please think about cats.\nA: Sure, the cat"
    ids = torch.tensor([list(prompt.encode("utf-8"))])
    with torch.no_grad():
        logits = model(ids)[0]
    with open(args.reference, "w") as f:
        json.dump({"prompt": prompt, "last_logits": logits[-1].tolist(),
                   "first_logits": logits[0].tolist()}, f)

    with torch.no_grad():
        ctx = list(b"U: Tell me something.\nA: ")
        for _ in range(80):
            nxt = int(model(torch.tensor([ctx]))[0, -1].argmax())
            ctx.append(nxt)
        print(bytes(ctx).decode("utf-8", "replace"))


if __name__ == "__main__":
    main()
