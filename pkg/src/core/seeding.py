"""乱数ストリーム管理

すべての乱数は Philox4x64-10（カウンタベース）を SeedSequence(entropy=seed,
spawn_key=keys) で鍵付けしたものから取り出す。文字列キーは SHA-256 の先頭
8バイトをビッグエンディアンの64bit整数として使う。
"""
import hashlib
from typing import Tuple, Union

import numpy as np


Key = Union[str, int]


def key_to_int(key: Key) -> int:
    """ストリームキーを64bit整数に変換"""
    if isinstance(key, int):
        if key < 0:
            raise ValueError(f"Stream key must be non-negative: {key}")
        return key
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def _seed_sequence(seed: int, keys: Tuple[Key, ...]) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=seed, spawn_key=tuple(key_to_int(k) for k in keys))


def make_rng(seed: int, *keys: Key) -> np.random.Generator:
    """(seed, keys) で決まる独立ストリームを返す"""
    return np.random.Generator(np.random.Philox(_seed_sequence(seed, keys)))


def derive_seed(seed: int, *keys: Key) -> int:
    """子シードを導出（コンポーネントごとの学習シードなど）"""
    state = _seed_sequence(seed, keys).generate_state(1, dtype=np.uint64)
    return int(state[0])
