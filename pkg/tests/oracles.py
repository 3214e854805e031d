"""Independent oracles used by unit and acceptance tests.

The Fisher oracle recomputes one modality branch (projection, ReLU,
mask-aware segment-mean pooling, token mean, bias-free head) in plain
numpy over complex arrays, and differentiates it one parameter entry at a
time by the complex-step rule Im(f(x + ih)) / h, which is exact to
machine precision. Nothing here touches the package's tape.
"""

import numpy as np

COMPLEX_STEP = 1e-20


def branch_logits(seq, mask, w_enc, w_head, tokens):
    """Forward pass of one branch; complex-safe (ReLU gates on real part)."""
    proj = seq.astype(w_enc.dtype) @ w_enc
    act = np.where(proj.real > 0, proj, 0.0)
    t = seq.shape[0]
    pooled_tokens = np.zeros((tokens, w_enc.shape[1]), dtype=w_enc.dtype)
    for k in range(tokens):
        lo, hi = (t * k) // tokens, (t * (k + 1)) // tokens
        live = mask[lo:hi]
        if live.any():
            pooled_tokens[k] = act[lo:hi][live].sum(axis=0) / live.sum()
    pooled = pooled_tokens.mean(axis=0)
    return pooled @ w_head


def _scalar_output(seq, mask, w_enc, w_head, tokens, mode, class_index):
    logits = branch_logits(seq, mask, w_enc, w_head, tokens)
    if mode == "logit":
        return logits[class_index]
    # log softmax probability of class_index (stable shift on the real part)
    shifted = logits - logits.real.max()
    return shifted[class_index] - np.log(np.exp(shifted).sum())


def branch_gradient(seq, mask, w_enc, w_head, tokens, mode, class_index):
    """Per-entry complex-step gradients for both parameter matrices."""
    grads = []
    for which in ("enc", "head"):
        base = w_enc if which == "enc" else w_head
        g = np.zeros_like(base, dtype=np.float64)
        flat = base.reshape(-1)
        for j in range(flat.size):
            enc_c = w_enc.astype(np.complex128)
            head_c = w_head.astype(np.complex128)
            target = enc_c if which == "enc" else head_c
            target.reshape(-1)[j] += 1j * COMPLEX_STEP
            out = _scalar_output(seq, mask, enc_c, head_c, tokens, mode, class_index)
            g.reshape(-1)[j] = out.imag / COMPLEX_STEP
        grads.append(g)
    return grads


def fisher_trace_oracle(seq, mask, w_enc, w_head, tokens, mode="output-jacobian",
                        class_index=None):
    """Brute-force trace: squared gradient entries summed one at a time."""
    if not mask.any():
        return 0.0
    if mode == "output-jacobian":
        total = 0.0
        for c in range(w_head.shape[1]):
            for g in branch_gradient(seq, mask, w_enc, w_head, tokens, "logit", c):
                total += float((g * g).sum())
        return total
    if class_index is None:
        logits = branch_logits(seq, mask, w_enc.astype(np.complex128),
                               w_head.astype(np.complex128), tokens)
        class_index = int(np.argmax(logits.real))
    total = 0.0
    for g in branch_gradient(seq, mask, w_enc, w_head, tokens, "logprob",
                             class_index):
        total += float((g * g).sum())
    return total


def confusion_metrics_oracle(pred, true):
    """Binary F1 (positive class 1) and accuracy from explicit counts."""
    tp = fp = fn = correct = 0
    for p, t in zip(pred, true):
        correct += p == t
        if p == 1 and t == 1:
            tp += 1
        elif p == 1 and t == 0:
            fp += 1
        elif p == 0 and t == 1:
            fn += 1
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    return f1, correct / len(pred)
