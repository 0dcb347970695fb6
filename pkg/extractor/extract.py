#!/usr/bin/env python3
"""Capture transformer prediction-point tensors for stability analysis.

Hooks a causal language model, records the final-layer hidden state (after
the last norm, immediately before the unembedding), the logits, and the
unembedding matrix W at the next-token prediction point or at every step of
a greedy generation trace, and writes them in the analysis toolkit's tensor
format ("TCB1" files plus a JSON manifest).

Logits are captured directly as well as recomputed from W @ h: real
architectures can insert normalization between the "final hidden state" and
the unembedding, so the captured logits are ground truth and the manifest
records whether z = W h actually held.  Decoding is greedy only; the trace
analytics' greedy-consistency invariant depends on it.
"""

from __future__ import annotations

import argparse
import json
import struct
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"TCB1"
DTYPE_CODES = {"float32": 0, "float64": 1}
CODE_NUMPY = {0: np.dtype("<f4"), 1: np.dtype("<f8")}

MODE_SINGLE = "single_point"
MODE_TRACE = "trace"

#: max |W h - logits| tolerated before the manifest flags the linear-head
#: assumption as broken (float32 forward-pass slack).
WH_MATCH_TOL = 1e-3


@dataclass
class ExtractionJob:
    model: str
    prompt: str
    mode: str = MODE_SINGLE
    max_new: int = 20
    out_dir: Path = Path("capture")


# --- tensor format (mirrors the analysis toolkit's on-disk interface) ----------


def write_tensor(arr: np.ndarray, path: Path) -> None:
    arr = np.ascontiguousarray(arr)
    if arr.dtype == np.float64:
        code = 1
    else:
        arr = arr.astype(np.float32)
        code = 0
    rank = arr.ndim
    if rank > 8:
        raise ValueError(f"rank {rank} exceeds the format's maximum of 8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<BB", code, rank))
        if rank:
            fh.write(struct.pack(f"<{rank}Q", *arr.shape))
        fh.write(arr.astype(CODE_NUMPY[code], copy=False).tobytes())


def read_tensor(path: Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 6 or raw[:4] != MAGIC:
        raise ValueError(f"{path}: bad magic, not a TCB1 tensor file")
    code, rank = struct.unpack("<BB", raw[4:6])
    dtype = CODE_NUMPY[code]
    offset = 6 + 8 * rank
    shape = struct.unpack(f"<{rank}Q", raw[6:offset]) if rank else ()
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    payload = raw[offset:]
    if len(payload) != count * dtype.itemsize:
        raise ValueError(f"{path}: payload size mismatch for shape {shape}")
    return np.frombuffer(payload, dtype=dtype).reshape(shape).astype(np.float64)


# --- capture --------------------------------------------------------------------


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max())
    return e / e.sum()


def load_model(model_id: str):
    import torch
    from transformers import AutoModelForCausalLM, AutoTokenizer

    tokenizer = AutoTokenizer.from_pretrained(model_id)
    model = AutoModelForCausalLM.from_pretrained(model_id)
    model.eval()
    torch.set_grad_enabled(False)
    return tokenizer, model


def _capture_steps(model, input_ids, n_steps: int):
    """Greedy loop: one (h, logits, token) triple per generated position.

    h is the last hidden_states entry at the final position, i.e. the output
    of the final block after the model's closing norm, which is exactly what
    the unembedding consumes.
    """
    import torch

    steps = []
    ids = input_ids
    for _ in range(n_steps):
        out = model(ids, output_hidden_states=True)
        h = out.hidden_states[-1][0, -1].detach().float().cpu().numpy()
        logits = out.logits[0, -1].detach().float().cpu().numpy()
        token = int(np.argmax(logits))  # greedy; ties resolve to lowest index
        steps.append((h, logits, token))
        ids = torch.cat([ids, torch.tensor([[token]], dtype=ids.dtype)], dim=1)
    return steps


def extract(job: ExtractionJob) -> Path:
    """Run the capture and write tensors + manifest; returns the manifest path."""
    if job.mode not in (MODE_SINGLE, MODE_TRACE):
        raise ValueError(f"unknown mode {job.mode!r}")
    tokenizer, model = load_model(job.model)
    head = model.get_output_embeddings()
    if head is None:
        raise ValueError(f"{job.model}: model exposes no output embedding matrix")
    W = head.weight.detach().float().cpu().numpy()
    v, d = W.shape

    enc = tokenizer(job.prompt, return_tensors="pt")
    n_steps = 1 if job.mode == MODE_SINGLE else job.max_new
    try:
        steps = _capture_steps(model, enc["input_ids"], n_steps)
    except RuntimeError as exc:
        raise RuntimeError(
            f"forward pass failed ({exc}); W alone needs {W.nbytes / 1e6:.1f} MB, "
            f"V={v}, d={d}"
        ) from exc

    out_dir = Path(job.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_tensor(W, out_dir / "W.tcb")
    entries = [
        {"name": "W", "path": "W.tcb", "dtype": "float32", "shape": [v, d], "role": "W"}
    ]
    token_ids = []
    wh_dev = 0.0
    for i, (h, logits, token) in enumerate(steps):
        hname, zname = f"h_step_{i:04d}", f"logits_step_{i:04d}"
        write_tensor(h, out_dir / f"{hname}.tcb")
        write_tensor(logits, out_dir / f"{zname}.tcb")
        entries.append({"name": hname, "path": f"{hname}.tcb", "dtype": "float32",
                        "shape": [d], "role": "h"})
        entries.append({"name": zname, "path": f"{zname}.tcb", "dtype": "float32",
                        "shape": [v], "role": "logits"})
        token_ids.append(token)
        wh_dev = max(wh_dev, float(np.max(np.abs(W.astype(np.float64) @ h - logits))))

    metadata = {
        "model": job.model,
        "V": v,
        "d": d,
        "mode": job.mode,
        "prompt": job.prompt,
        "decoding": "greedy",
        "token_ids": token_ids,
        "hidden_state_source": "final layer output, post closing norm, pre unembedding",
        "logits_match_wh": wh_dev <= WH_MATCH_TOL,
        "wh_max_abs_dev": wh_dev,
    }
    manifest_path = out_dir / "manifest.json"
    manifest_path.write_text(
        json.dumps({"version": 1, "metadata": metadata, "entries": entries}, indent=2)
        + "\n"
    )
    return manifest_path


# --- validation -----------------------------------------------------------------


def validate_roundtrip(manifest_path, tol: float = 1e-3) -> bool:
    """Re-read every tensor and check softmax(W h) reproduces the captured
    probability of each emitted token within ``tol``.

    Mismatches are reported with their step index on stderr.
    """
    manifest_path = Path(manifest_path)
    doc = json.loads(manifest_path.read_text())
    base = manifest_path.parent
    by_name = {e["name"]: e for e in doc["entries"]}
    W = read_tensor(base / by_name["W"]["path"])
    token_ids = doc["metadata"]["token_ids"]
    ok = True
    for i, token in enumerate(token_ids):
        h = read_tensor(base / by_name[f"h_step_{i:04d}"]["path"])
        logits = read_tensor(base / by_name[f"logits_step_{i:04d}"]["path"])
        p_captured = float(_softmax(logits)[token])
        p_recomputed = float(_softmax(W @ h)[token])
        if abs(p_captured - p_recomputed) > tol:
            print(
                f"roundtrip mismatch at step {i}: captured p={p_captured:.6f}, "
                f"recomputed p={p_recomputed:.6f} (tol {tol})",
                file=sys.stderr,
            )
            ok = False
    return ok


# --- CLI ------------------------------------------------------------------------


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        description="Capture hidden states, logits, and the unembedding matrix "
        "from a causal LM in the stability toolkit's tensor format."
    )
    parser.add_argument("--model", required=True, help="model id or local checkpoint path")
    group = parser.add_mutually_exclusive_group(required=True)
    group.add_argument("--prompt", help="prompt text")
    group.add_argument("--prompt-file", help="file containing the prompt text")
    parser.add_argument("--mode", choices=[MODE_SINGLE, MODE_TRACE], default=MODE_SINGLE)
    parser.add_argument("--max-new", type=int, default=20,
                        help="generated steps in trace mode (greedy)")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--skip-validate", action="store_true",
                        help="skip the post-extraction roundtrip check")
    args = parser.parse_args(argv)

    prompt = args.prompt if args.prompt is not None else Path(args.prompt_file).read_text()
    job = ExtractionJob(model=args.model, prompt=prompt, mode=args.mode,
                        max_new=args.max_new, out_dir=Path(args.out))
    try:
        manifest = extract(job)
    except Exception as exc:  # model load / capture failures
        print(f"extraction failed: {exc}", file=sys.stderr)
        return 1
    print(f"wrote manifest {manifest}")
    if not args.skip_validate:
        if not validate_roundtrip(manifest):
            return 1
        print("roundtrip validation passed")
    return 0


if __name__ == "__main__":
    sys.exit(main())
