#!/usr/bin/env python3
"""Regenerate the bundled fixture networks, dataset and golden values.

Dev tool only; the library never runs this. Requires numpy, torch, sklearn.

    python3 crates/core/fixtures/gen_fixtures.py

Outputs (next to this script):
    digits_test.json          600-sample 10-class dataset (8x8 digits, u8 pixels)
    mlp/model.json + fc*.json 64-32-16-10 MLP, int8 weights, no biases
    cnn/model.json + *.json   conv(1->4, 3x3) + fc(144->10)
    golden/mlp_scores.json    integer scores from an independent numpy forward pass
    golden/cnn_scores.json
    golden/quantize.json      reference quantizer outputs on a random float matrix
"""
import base64
import json
import os

import numpy as np
import torch
from sklearn.datasets import load_digits
from sklearn.model_selection import train_test_split

HERE = os.path.dirname(os.path.abspath(__file__))
SEED = 20221


def round_half_away(v):
    return np.sign(v) * np.floor(np.abs(v) + 0.5)


def quantize_signed(w, bits=8):
    qmax = 2 ** (bits - 1) - 1
    scale = np.abs(w).max() / qmax
    return np.clip(round_half_away(w / scale), -qmax - 1, qmax).astype(np.int64)


def encode_tensor(arr, bits, signed):
    arr = np.asarray(arr, dtype=np.int64)
    width = 1 if bits <= 8 else (2 if bits <= 16 else 4)
    kind = {1: "b", 2: "h", 4: "i"}[width] if signed else {1: "B", 2: "H", 4: "I"}[width]
    raw = arr.astype(np.dtype("<" + kind)).tobytes()
    return {
        "shape": list(arr.shape),
        "bits": bits,
        "signed": signed,
        "data": base64.b64encode(raw).decode(),
    }


def write_json(path, obj):
    os.makedirs(os.path.dirname(path), exist_ok=True)
    with open(path, "w") as f:
        json.dump(obj, f, indent=1)
        f.write("\n")


def pick_shift(pre):
    relu = np.maximum(pre, 0)
    hi = np.percentile(relu, 99.9)
    s = 0
    while (hi / (1 << s)) > 255:
        s += 1
    return s


def requant(pre, shift):
    return np.clip(np.maximum(pre, 0) >> shift, 0, 255)


def im2col(x, k):
    # x: (C, H, W) -> (patches, C*k*k), patch-major, row-major over output positions
    c, h, w = x.shape
    oh, ow = h - k + 1, w - k + 1
    cols = np.zeros((oh * ow, c * k * k), dtype=np.int64)
    for oy in range(oh):
        for ox in range(ow):
            cols[oy * ow + ox] = x[:, oy:oy + k, ox:ox + k].reshape(-1)
    return cols


def main():
    rng = np.random.default_rng(SEED)
    torch.manual_seed(SEED)

    digits = load_digits()
    xf = digits.data.astype(np.float64)
    y = digits.target.astype(np.int64)
    xq = round_half_away(xf * 255.0 / 16.0).clip(0, 255).astype(np.int64)
    x_tr, x_te, y_tr, y_te = train_test_split(
        xq, y, test_size=600, random_state=SEED, stratify=y
    )

    write_json(
        os.path.join(HERE, "digits_test.json"),
        {
            "input_shape": [64],
            "bits": 8,
            "num_classes": 10,
            "inputs": x_te.tolist(),
            "labels": y_te.tolist(),
        },
    )

    xt = torch.tensor(x_tr / 255.0, dtype=torch.float32)
    yt = torch.tensor(y_tr)

    # ---- MLP 64-32-16-10 ----
    mlp = torch.nn.Sequential(
        torch.nn.Linear(64, 32, bias=False),
        torch.nn.ReLU(),
        torch.nn.Linear(32, 16, bias=False),
        torch.nn.ReLU(),
        torch.nn.Linear(16, 10, bias=False),
    )
    train(mlp, xt, yt)
    ws = [quantize_signed(m.weight.detach().numpy().T.astype(np.float64))
          for m in mlp if isinstance(m, torch.nn.Linear)]

    shifts = []
    h = x_tr
    for w in ws[:-1]:
        pre = h @ w
        s = pick_shift(pre)
        shifts.append(s)
        h = requant(pre, s)

    def mlp_forward(x):
        h = x
        for w, s in zip(ws[:-1], shifts):
            h = requant(h @ w, s)
        return h @ ws[-1]

    acc = (mlp_forward(x_te).argmax(1) == y_te).mean()
    print("mlp int accuracy", acc, "shifts", shifts)

    layers = []
    for i, w in enumerate(ws):
        name = f"fc{i}.json"
        write_json(os.path.join(HERE, "mlp", name), encode_tensor(w, 8, True))
        last = i == len(ws) - 1
        layers.append({
            "kind": "fc",
            "weight": name,
            "activation": "none" if last else "relu",
            "shift": 0 if last else shifts[i],
        })
    write_json(os.path.join(HERE, "mlp", "model.json"), {
        "input_shape": [64], "input_bits": 8, "num_classes": 10, "layers": layers,
    })
    write_json(os.path.join(HERE, "golden", "mlp_scores.json"), {
        "accuracy_correct": int((mlp_forward(x_te).argmax(1) == y_te).sum()),
        "samples": list(range(20)),
        "scores": mlp_forward(x_te[:20]).tolist(),
    })

    # ---- CNN: conv(1->4, 3x3) + fc(144->10) ----
    class Cnn(torch.nn.Module):
        def __init__(self):
            super().__init__()
            self.conv = torch.nn.Conv2d(1, 4, 3, bias=False)
            self.fc = torch.nn.Linear(144, 10, bias=False)

        def forward(self, x):
            h = torch.relu(self.conv(x.view(-1, 1, 8, 8)))
            return self.fc(h.flatten(1))

    cnn = Cnn()
    train(cnn, xt, yt)
    kq = quantize_signed(cnn.conv.weight.detach().numpy().astype(np.float64))  # (4,1,3,3)
    fq = quantize_signed(cnn.fc.weight.detach().numpy().T.astype(np.float64))  # (144,10)
    kmat = kq.reshape(4, -1).T  # (9, 4)

    def conv_pre(x):
        out = []
        for sample in x:
            cols = im2col(sample.reshape(1, 8, 8), 3)
            out.append((cols @ kmat).T.reshape(-1))  # channel-major (4*6*6)
        return np.array(out)

    cshift = pick_shift(conv_pre(x_tr))

    def cnn_forward(x):
        return requant(conv_pre(x), cshift) @ fq

    cacc = (cnn_forward(x_te).argmax(1) == y_te).mean()
    print("cnn int accuracy", cacc, "shift", cshift)
    write_json(os.path.join(HERE, "cnn", "conv0.json"), encode_tensor(kq, 8, True))
    write_json(os.path.join(HERE, "cnn", "fc1.json"), encode_tensor(fq, 8, True))
    write_json(os.path.join(HERE, "cnn", "model.json"), {
        "input_shape": [1, 8, 8], "input_bits": 8, "num_classes": 10,
        "layers": [
            {"kind": "conv", "weight": "conv0.json", "activation": "relu", "shift": cshift,
             "stride": 1, "padding": 0},
            {"kind": "fc", "weight": "fc1.json", "activation": "none", "shift": 0},
        ],
    })
    write_json(os.path.join(HERE, "golden", "cnn_scores.json"), {
        "accuracy_correct": int((cnn_forward(x_te).argmax(1) == y_te).sum()),
        "samples": list(range(20)),
        "scores": cnn_forward(x_te[:20]).tolist(),
    })

    # ---- reference quantizer fixture ----
    m = rng.normal(0.0, 1.5, size=(8, 8))
    m[0, 0] = 0.0
    cases = []
    for bits, signed in [(8, True), (4, True), (8, False), (12, True)]:
        cases.append({"bits": bits, "signed": signed, "expected": ref_quantize(m, bits, signed).tolist()})
    write_json(os.path.join(HERE, "golden", "quantize.json"), {
        "values": m.reshape(-1).tolist(), "cases": cases,
    })


def ref_quantize(v, bits, signed):
    v = v.reshape(-1)
    if signed:
        qmin, qmax = -(2 ** (bits - 1)), 2 ** (bits - 1) - 1
        top = np.abs(v).max()
    else:
        qmin, qmax = 0, 2 ** bits - 1
        top = max(v.max(), 0.0)
    scale = top / max(qmax, 1) if top > 0 else 1.0
    q = np.sign(v / scale) * np.floor(np.abs(v / scale) + 0.5)
    return np.clip(q, qmin, qmax).astype(np.int64)


def train(model, x, y, epochs=400):
    opt = torch.optim.Adam(model.parameters(), lr=1e-2)
    loss_fn = torch.nn.CrossEntropyLoss()
    for _ in range(epochs):
        opt.zero_grad()
        loss = loss_fn(model(x), y)
        loss.backward()
        opt.step()


if __name__ == "__main__":
    main()
