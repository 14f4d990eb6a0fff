import numpy as np

from cxr_ef.cohort import CohortManifest, CohortRecord, Label, Race, Sex
from cxr_ef.evaluation import PredictionRecord

R, P = Label.REDUCED, Label.PRESERVED


def make_manifest(studies_per_patient, seed=0, labels=None):
    """Manifest with one patient per entry of ``studies_per_patient``."""
    rng = np.random.default_rng(seed)
    records, k = [], 0
    for p, count in enumerate(studies_per_patient):
        label = labels[p] if labels is not None else (Label.REDUCED if rng.random() < 0.5 else Label.PRESERVED)
        for _ in range(count):
            records.append(CohortRecord(f"s{k:05d}", f"p{p:04d}", f"img/{k:05d}.png", label,
                                        int(rng.integers(20, 90)), Sex.FEMALE if rng.random() < 0.5 else Sex.MALE,
                                        Race.WHITE))
            k += 1
    return CohortManifest(records)


def tinyconv64(seed, size=16):
    """Float64 TinyConv so finite differences resolve the gradient."""
    from cxr_ef.models import BackboneKind, ModelConfig, build_model

    return build_model(ModelConfig(BackboneKind.TINYCONV, input_size=(size, size)), seed=seed).double().eval()


def central_difference(model, image, i, j, eps=1e-3, target=Label.REDUCED):
    import torch

    def score(img):
        with torch.no_grad():
            return float(model.target_score(model(model.as_batch(img[None])), target)[0])

    up, down = image.copy(), image.copy()
    up[i, j, 0] += eps
    down[i, j, 0] -= eps
    return (score(up) - score(down)) / (2 * eps)


def gradcam_net(a, b, w, c, stride=1):
    """features = Conv2d(1, 1, 1x1, stride) with weight a and bias b; head = GAP + Linear(w, c).

    The last-conv activation is A = a*x + b (subsampled by ``stride``), and
    d logit / dA = w / (h*w) everywhere, so the map is ReLU(w/(h*w) * A).
    """
    import torch
    from torch import nn

    from cxr_ef.models import BinaryHead, Model

    conv = nn.Conv2d(1, 1, kernel_size=1, stride=stride).double()
    head = BinaryHead(1).double()
    with torch.no_grad():
        conv.weight.fill_(a)
        conv.bias.fill_(b)
        head.fc.weight.fill_(w)
        head.fc.bias.fill_(c)
    return Model(conv, head, input_shape=None).eval()


def brute_force(ps, truths, hi=0.9, lo=0.1):
    """Naive second implementation: explicit loops over index lists."""
    n = len(ps)
    pred = ["r" if p > 0.5 else "p" for p in ps]
    tru = ["r" if t is R else "p" for t in truths]
    out = {}
    for c in ("r", "p"):
        predicted_c = [i for i in range(n) if pred[i] == c]
        actual_c = [i for i in range(n) if tru[i] == c]
        hits = [i for i in predicted_c if tru[i] == c]
        prec = len(hits) / len(predicted_c) if predicted_c else 0.0
        rec = len(hits) / len(actual_c) if actual_c else 0.0
        f1 = 0.0 if prec + rec == 0 else 2 * prec * rec / (prec + rec)
        out[c] = (prec, rec, f1, len(actual_c))
    correct = [i for i in range(n) if pred[i] == tru[i]]
    wrong = [i for i in range(n) if pred[i] != tru[i]]
    out["acc"] = len(correct) / n
    out["mis"] = len(wrong) / n
    bucket = lambda idx: (sum(ps[i] > hi for i in idx), sum(ps[i] < lo for i in idx),
                          sum(lo <= ps[i] <= hi for i in idx))
    out["buckets"] = (bucket(range(n)), bucket(wrong))
    return out


def random_set(rng):
    n = int(rng.integers(1, 501))
    ps = rng.uniform(0, 1, n)
    # sprinkle exact boundary values
    for v in (0.5, 0.9, 0.1):
        if rng.random() < 0.3:
            ps[rng.integers(n)] = v
    truths = [R if t else P for t in rng.random(n) < rng.uniform(0.05, 0.95)]
    return [PredictionRecord(f"s{i}", float(p), t) for i, (p, t) in enumerate(zip(ps, truths))]


# one "criterion N: PASS/FAIL/SKIP ..." line per acceptance test, printed in the terminal summary
ACCEPTANCE_LINES: list[str] = []
