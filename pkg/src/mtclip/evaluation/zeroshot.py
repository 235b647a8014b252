"""Prompted zero-shot classification and image-text retrieval on a trained bundle."""

from __future__ import annotations

import dataclasses
import logging
from typing import Optional, Sequence

import numpy as np

from mtclip.evaluation.metrics import retrieval_report, top1
from mtclip.models import ModelBundle, encode_image, encode_text
from mtclip.synthdata.vocab import default_vocab, tokenize_batch
from mtclip.tensor import no_grad

log = logging.getLogger(__name__)

DEFAULT_TEMPLATE = "a photo of a {}"


@dataclasses.dataclass
class ZeroShotResult:
    predictions: np.ndarray
    scores: np.ndarray          # (N, num_classes) cosine similarities
    top1: Optional[float] = None


def embed_images(model: ModelBundle, images: np.ndarray, batch_size: int = 128) -> np.ndarray:
    out = []
    with no_grad():
        for i in range(0, len(images), batch_size):
            emb, _ = encode_image(model, images[i:i + batch_size])
            out.append(emb.data)
    return np.concatenate(out) if out else np.zeros((0, model.config.shared_dim))


def embed_texts(model: ModelBundle, captions: Sequence[str], batch_size: int = 256) -> np.ndarray:
    tokens = tokenize_batch(list(captions), context_length=model.config.text_context_length)
    out = []
    with no_grad():
        for i in range(0, len(tokens), batch_size):
            out.append(encode_text(model, tokens[i:i + batch_size]).data)
    return np.concatenate(out) if out else np.zeros((0, model.config.shared_dim))


def class_text_embeddings(model: ModelBundle, class_names: Sequence[str], template: str = DEFAULT_TEMPLATE):
    vocab = default_vocab()
    prompts = [template.format(name) for name in class_names]
    for p in prompts:
        unknown = [w for w in p.lower().split() if w not in vocab]
        if unknown:
            log.warning("zero-shot prompt %r has out-of-vocabulary words %s (mapped to <unk>)", p, unknown)
    return embed_texts(model, prompts)


def zero_shot_classify(model: ModelBundle, class_names: Sequence[str], template: str, images: np.ndarray,
                       labels: Optional[np.ndarray] = None, image_embs: Optional[np.ndarray] = None) -> ZeroShotResult:
    """Label each image with the class whose prompt embedding is most similar.

    Ties go to the earliest class in ``class_names``.
    """
    text = class_text_embeddings(model, class_names, template)
    img = embed_images(model, images) if image_embs is None else image_embs
    scores = img @ text.T
    preds = np.argmax(scores, axis=1)
    acc = top1(scores, labels) if labels is not None else None
    return ZeroShotResult(preds, scores, acc)


def retrieval(model: ModelBundle, images: np.ndarray, captions: Sequence[str], ks=(1, 5, 10)):
    """Recall@k in both directions for paired images and captions."""
    return retrieval_report(embed_images(model, images), embed_texts(model, captions), ks)
