"""Mapping between named model arrays and slot-packed ciphertext vectors.

All arrays are flattened row-major and concatenated in declaration order,
then cut into ``slot_count``-sized chunks; the last chunk is zero padded.
The layout keeps enough information to map every parameter back to its
(ciphertext, slot) position.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import ckks
from .errors import EmptyModelError, LayoutMismatchError, LevelMismatchError, ScaleMismatchError


@dataclass(frozen=True)
class ArrayDescriptor:
    name: str
    shape: tuple[int, ...]
    size: int
    start_ciphertext: int
    start_slot: int


@dataclass(frozen=True)
class ModelLayout:
    arrays: tuple[ArrayDescriptor, ...]
    slots_per_ciphertext: int

    @property
    def total_parameters(self) -> int:
        return sum(a.size for a in self.arrays)

    @property
    def ciphertext_count(self) -> int:
        return math.ceil(self.total_parameters / self.slots_per_ciphertext)

    def offsets(self) -> list[int]:
        return [a.start_ciphertext * self.slots_per_ciphertext + a.start_slot for a in self.arrays]


@dataclass(frozen=True)
class PackedModel:
    layout: ModelLayout
    ciphertexts: tuple[ckks.Ciphertext, ...]

    def __post_init__(self):
        if len(self.ciphertexts) != self.layout.ciphertext_count:
            raise LayoutMismatchError(
                f"{len(self.ciphertexts)} ciphertexts for a layout needing {self.layout.ciphertext_count}"
            )
        if self.ciphertexts:
            first = self.ciphertexts[0]
            for ct in self.ciphertexts[1:]:
                if ct.level != first.level:
                    raise LevelMismatchError("packed ciphertexts differ in level")
                if ct.scale != first.scale:
                    raise ScaleMismatchError("packed ciphertexts differ in scale")

    @property
    def level(self) -> int:
        return self.ciphertexts[0].level

    @property
    def scale(self) -> float:
        return self.ciphertexts[0].scale


def _as_items(model):
    if isinstance(model, dict):
        return list(model.items())
    return list(model)


def flatten(model, slots_per_ciphertext: int = 8192) -> tuple[ModelLayout, np.ndarray]:
    """Row-major concatenation of ``(name, array)`` pairs (or a dict)."""
    items = _as_items(model)
    if not items:
        raise EmptyModelError("model has no arrays")
    descriptors = []
    chunks = []
    offset = 0
    for name, arr in items:
        arr = np.asarray(arr, dtype=np.float64)
        start_ct, start_slot = divmod(offset, slots_per_ciphertext)
        descriptors.append(
            ArrayDescriptor(str(name), tuple(int(d) for d in arr.shape), int(arr.size), start_ct, start_slot)
        )
        chunks.append(arr.ravel())
        offset += arr.size
    if offset == 0:
        raise EmptyModelError("model has no parameters")
    return ModelLayout(tuple(descriptors), slots_per_ciphertext), np.concatenate(chunks)


def unflatten(layout: ModelLayout, flat) -> dict[str, np.ndarray]:
    flat = np.asarray(flat, dtype=np.float64)
    if flat.ndim != 1 or flat.size < layout.total_parameters:
        raise LayoutMismatchError(
            f"vector of length {flat.size} is shorter than the layout's {layout.total_parameters} parameters"
        )
    out = {}
    for desc, start in zip(layout.arrays, layout.offsets()):
        out[desc.name] = flat[start:start + desc.size].reshape(desc.shape).copy()
    return out


def encrypt_model(model, pk: ckks.PublicKey, params: ckks.CkksParams, rng: np.random.Generator,
                  workers: int = 1) -> PackedModel:
    """Flatten, chunk, encode at scale D and encrypt every chunk.

    Each chunk draws from its own child generator spawned from ``rng``, so the
    ciphertexts are identical whatever ``workers`` is.
    """
    layout, flat = flatten(model, params.slot_count)
    count = layout.ciphertext_count
    slots = params.slot_count
    child_rngs = rng.spawn(count)

    def one(i):
        chunk = flat[i * slots:(i + 1) * slots]
        return ckks.encrypt(pk, ckks.encode(chunk, params), child_rngs[i])

    if workers > 1 and count > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            cts = list(pool.map(one, range(count)))
    else:
        cts = [one(i) for i in range(count)]
    return PackedModel(layout, tuple(cts))


def decrypt_model(packed: PackedModel, sk: ckks.SecretKey) -> dict[str, np.ndarray]:
    flat = np.concatenate([ckks.decode(ckks.decrypt(sk, ct)) for ct in packed.ciphertexts])
    return unflatten(packed.layout, flat)
