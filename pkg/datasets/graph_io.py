"""圖與語料載入

- 邊列表（`src dst [weight]`，`#` 開頭為註解）→ SparseGraph
- UCI bag-of-words 語料 → Corpus
- 節點隨機分割為 X、A、B、C 四組 → NodePartition
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from config import MIN_DOC_LENGTH
from errors import ConfigurationError, FormatError, ParseError, ValidationError

logger = logging.getLogger(__name__)

SET_LABELS: tuple[str, ...] = ("X", "A", "B", "C")


# ====================================================================
# 資料型別
# ====================================================================

@dataclass(frozen=True)
class SparseGraph:
    """以 CSR 儲存的鄰接矩陣 G。

    Attributes:
        adjacency: n×n CSR 矩陣，無重複元素、對角線為 0
        directed: 是否為有向圖（無向圖已對稱化）
        weighted: 權重是否有意義（False 時所有權重為 1）
        bipartite_split: 二部圖左側節點數；左側節點佔 [0, split)
        remap: 內部索引 → 原始節點 ID
    """

    adjacency: sp.csr_matrix
    directed: bool = False
    weighted: bool = False
    bipartite_split: int | None = None
    remap: tuple[str, ...] = ()
    self_loops_dropped: int = 0

    def __post_init__(self) -> None:
        n = self.adjacency.shape[0]
        if self.adjacency.shape != (n, n):
            raise ValidationError(f"鄰接矩陣必須為方陣: {self.adjacency.shape}")
        if self.adjacency.nnz and self.adjacency.data.min() < 0:
            raise ValidationError("權重必須非負")
        if self.remap and len(self.remap) != n:
            raise ValidationError("remap 長度與節點數不符")

    @property
    def n_nodes(self) -> int:
        return self.adjacency.shape[0]

    @property
    def nnz(self) -> int:
        return self.adjacency.nnz

    def external_ids(self) -> tuple[str, ...]:
        """內部索引對應的原始 ID；未載入自檔案時即為索引字串。"""
        if self.remap:
            return self.remap
        return tuple(str(i) for i in range(self.n_nodes))

    def block(self, rows: np.ndarray, cols: np.ndarray) -> sp.csr_matrix:
        """取出子矩陣 G_{rows, cols}。"""
        return self.adjacency[rows][:, cols].tocsr()

    def degrees(self) -> np.ndarray:
        """每個節點的鄰居數（出度）。"""
        return np.diff(self.adjacency.indptr).astype(float)


@dataclass(frozen=True)
class Corpus:
    """文件 × 詞彙的詞頻矩陣。

    Attributes:
        freq: n_docs×vocab_size CSR，每列為一份文件的 c_t
        doc_ids: 保留文件的原始 docID（1-indexed）
        skipped: 因總詞數 < 3 而略過的文件數
    """

    freq: sp.csr_matrix
    doc_ids: tuple[int, ...] = ()
    skipped: int = 0

    @property
    def n_docs(self) -> int:
        return self.freq.shape[0]

    @property
    def vocab_size(self) -> int:
        return self.freq.shape[1]

    def doc_lengths(self) -> np.ndarray:
        return np.asarray(self.freq.sum(axis=1)).ravel()


@dataclass(frozen=True)
class NodePartition:
    """不相交的節點集合 X、A、B、C（各自遞增排序）。"""

    X: np.ndarray
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    seed: int = 0
    n_nodes: int = field(default=0)

    def get(self, label: str) -> np.ndarray:
        if label not in SET_LABELS:
            raise ValidationError(f"未知的集合標籤: {label!r}")
        return getattr(self, label)

    def sizes(self) -> dict[str, int]:
        return {label: len(self.get(label)) for label in SET_LABELS}

    def complement_of_a(self) -> np.ndarray:
        """A^c = X ∪ B ∪ C，遞增排序。"""
        return np.sort(np.concatenate([self.X, self.B, self.C]))

    def swapped(self) -> NodePartition:
        """交換 X 與 A 的角色，供第二輪估計 Π̂_A 使用。"""
        return NodePartition(
            X=self.A, A=self.X, B=self.B, C=self.C,
            seed=self.seed, n_nodes=self.n_nodes,
        )


# ====================================================================
# 邊列表
# ====================================================================

def _sort_ids(ids: set[str]) -> list[str]:
    """全為整數時依數值排序，否則依字串排序。"""
    try:
        return sorted(ids, key=int)
    except ValueError:
        return sorted(ids)


def load_edge_list(
    path: str | Path,
    directed: bool = False,
    weighted: bool = False,
    bipartite: bool = False,
) -> SparseGraph:
    """讀取邊列表並建立 SparseGraph。

    每個非空行為 `src dst [weight]`；`#` 開頭為註解。節點 ID 壓縮為
    [0, n)，二部圖時左側（src）節點排在前面。無向圖會對稱化；
    重複邊在加權時加總、未加權時合併為 1；自迴圈捨棄並警告。

    Args:
        path: 邊列表檔案
        directed: 是否為有向圖
        weighted: 是否讀取第三欄權重
        bipartite: src 與 dst 是否屬於不同節點集合

    Returns:
        SparseGraph

    Raises:
        ParseError: 某行格式錯誤（帶行號）
        ValidationError: 權重為負或圖為空
    """
    src_ids: list[str] = []
    dst_ids: list[str] = []
    weights: list[float] = []
    with open(path, encoding="utf-8") as f:
        for line_no, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            tokens = line.split()
            if len(tokens) not in (2, 3):
                raise ParseError(f"應為 'src dst [weight]': {line!r}", line_no)
            w = 1.0
            if len(tokens) == 3:
                try:
                    w = float(tokens[2])
                except ValueError as e:
                    raise ParseError(f"權重無法解析: {tokens[2]!r}", line_no) from e
                if not np.isfinite(w):
                    raise ParseError(f"權重必須為有限值: {tokens[2]!r}", line_no)
                if w < 0:
                    raise ValidationError(f"第 {line_no} 行權重為負: {w}")
            src_ids.append(tokens[0])
            dst_ids.append(tokens[1])
            weights.append(w if weighted else 1.0)

    if not src_ids:
        raise ValidationError(f"{path} 不含任何邊")

    if bipartite:
        left = _sort_ids(set(src_ids))
        right = _sort_ids(set(dst_ids) - set(left))
        overlap = set(dst_ids) & set(left)
        if overlap:
            raise ValidationError(
                f"二部圖的左右節點集合重疊，例如 {sorted(overlap)[:3]}"
            )
        remap = left + right
        split: int | None = len(left)
    else:
        remap = _sort_ids(set(src_ids) | set(dst_ids))
        split = None
    index = {node: i for i, node in enumerate(remap)}
    rows = np.fromiter((index[s] for s in src_ids), dtype=np.int64)
    cols = np.fromiter((index[d] for d in dst_ids), dtype=np.int64)
    vals = np.asarray(weights, dtype=float)

    graph = _build_graph(
        rows, cols, vals, len(remap), directed, weighted, split, tuple(remap)
    )
    logger.info(
        "[載入] %s: %d 個節點、%d 個儲存元素（%s、%s）",
        path, graph.n_nodes, graph.nnz,
        "有向" if directed else "無向",
        "加權" if weighted else "未加權",
    )
    return graph


def graph_from_edges(
    rows: np.ndarray,
    cols: np.ndarray,
    n_nodes: int,
    weights: np.ndarray | None = None,
    directed: bool = False,
    weighted: bool = False,
    bipartite_split: int | None = None,
) -> SparseGraph:
    """由索引陣列直接建立 SparseGraph（套用與 load_edge_list 相同的規則）。"""
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    if rows.size and (rows.min() < 0 or cols.min() < 0
                      or rows.max() >= n_nodes or cols.max() >= n_nodes):
        raise ValidationError("邊索引超出 [0, n_nodes)")
    vals = (np.ones(rows.size) if weights is None
            else np.asarray(weights, dtype=float))
    if vals.size and vals.min() < 0:
        raise ValidationError("權重必須非負")
    if not weighted:
        vals = np.ones(rows.size)
    return _build_graph(
        rows, cols, vals, n_nodes, directed, weighted, bipartite_split, ()
    )


def _build_graph(
    rows: np.ndarray,
    cols: np.ndarray,
    vals: np.ndarray,
    n: int,
    directed: bool,
    weighted: bool,
    split: int | None,
    remap: tuple[str, ...],
) -> SparseGraph:
    loops = rows == cols
    n_loops = int(loops.sum())
    if n_loops:
        logger.warning("[載入] 捨棄 %d 個自迴圈", n_loops)
        rows, cols, vals = rows[~loops], cols[~loops], vals[~loops]

    if not directed:
        # 無向邊以 (min, max) 正規化，讓 "0 1" 與 "1 0" 視為同一條邊
        lo = np.minimum(rows, cols)
        hi = np.maximum(rows, cols)
        rows, cols = lo, hi

    coo = sp.coo_matrix((vals, (rows, cols)), shape=(n, n))
    mat = coo.tocsr()
    mat.sum_duplicates()
    if not weighted:
        mat.data[:] = 1.0
    if not directed:
        mat = (mat + mat.T).tocsr()
        mat.sum_duplicates()
    mat.eliminate_zeros()
    mat.sort_indices()
    return SparseGraph(
        adjacency=mat,
        directed=directed,
        weighted=weighted,
        bipartite_split=split,
        remap=remap,
        self_loops_dropped=n_loops,
    )


def write_edge_list(graph: SparseGraph, path: str | Path) -> None:
    """以邊列表格式寫出 SparseGraph，重新載入會得到相同的稀疏結構。

    無向圖只寫上三角；加權圖寫出第三欄權重。
    """
    coo = graph.adjacency.tocoo()
    ids = graph.external_ids()
    mask = np.ones(coo.nnz, dtype=bool) if graph.directed else coo.row < coo.col
    with open(path, "w", encoding="utf-8") as f:
        for r, c, w in zip(coo.row[mask], coo.col[mask], coo.data[mask]):
            if graph.weighted:
                f.write(f"{ids[r]} {ids[c]} {float(w)!r}\n")
            else:
                f.write(f"{ids[r]} {ids[c]}\n")


def write_remap(graph: SparseGraph, path: str | Path) -> None:
    """寫出兩欄 `internal external` 對照表。"""
    with open(path, "w", encoding="utf-8") as f:
        for i, ext in enumerate(graph.external_ids()):
            f.write(f"{i} {ext}\n")


# ====================================================================
# UCI bag-of-words
# ====================================================================

def _read_int(token: str, line_no: int, what: str) -> int:
    try:
        return int(token)
    except ValueError as e:
        raise ParseError(f"{what} 必須為整數: {token!r}", line_no) from e


def load_bag_of_words(path: str | Path) -> Corpus:
    """讀取 UCI bag-of-words 格式語料。

    前三行依序為 n_docs、vocab_size、非零元素數，之後為 1-indexed 的
    `docID wordID count`。總詞數 < 3 的文件略過並計數。

    Raises:
        FormatError: 內容筆數與檔頭不符
        ValidationError: ID 超出範圍、詞數為負或語料為空
    """
    with open(path, encoding="utf-8") as f:
        lines = [(i, ln.strip()) for i, ln in enumerate(f, start=1)]
    lines = [(i, ln) for i, ln in lines if ln]
    if len(lines) < 3:
        raise FormatError(f"{path} 缺少三行檔頭")
    n_docs = _read_int(lines[0][1], lines[0][0], "n_docs")
    vocab_size = _read_int(lines[1][1], lines[1][0], "vocab_size")
    nnz = _read_int(lines[2][1], lines[2][0], "nnz")
    if n_docs <= 0 or vocab_size <= 0:
        raise ValidationError(f"n_docs 與 vocab_size 必須為正: {n_docs}, {vocab_size}")

    body = lines[3:]
    if len(body) != nnz:
        raise FormatError(f"{path} 檔頭宣告 {nnz} 筆，實際 {len(body)} 筆")

    docs = np.empty(nnz, dtype=np.int64)
    words = np.empty(nnz, dtype=np.int64)
    counts = np.empty(nnz, dtype=float)
    for pos, (line_no, line) in enumerate(body):
        tokens = line.split()
        if len(tokens) != 3:
            raise ParseError(f"應為 'docID wordID count': {line!r}", line_no)
        doc = _read_int(tokens[0], line_no, "docID")
        word = _read_int(tokens[1], line_no, "wordID")
        count = _read_int(tokens[2], line_no, "count")
        if not 1 <= doc <= n_docs:
            raise ValidationError(f"第 {line_no} 行 docID {doc} 超出 [1, {n_docs}]")
        if not 1 <= word <= vocab_size:
            raise ValidationError(
                f"第 {line_no} 行 wordID {word} 超出 [1, {vocab_size}]"
            )
        if count < 0:
            raise ValidationError(f"第 {line_no} 行詞數為負: {count}")
        docs[pos], words[pos], counts[pos] = doc - 1, word - 1, count

    freq = sp.coo_matrix(
        (counts, (docs, words)), shape=(n_docs, vocab_size)
    ).tocsr()
    freq.sum_duplicates()
    corpus = filter_short_documents(freq, np.arange(1, n_docs + 1))
    logger.info(
        "[載入] %s: 保留 %d 份文件、詞彙 %d，略過 %d 份",
        path, corpus.n_docs, corpus.vocab_size, corpus.skipped,
    )
    return corpus


def filter_short_documents(
    freq: sp.csr_matrix, doc_ids: np.ndarray
) -> Corpus:
    """移除總詞數 < 3 的文件。

    Raises:
        ValidationError: 所有文件皆被移除
    """
    lengths = np.asarray(freq.sum(axis=1)).ravel()
    keep = lengths >= MIN_DOC_LENGTH
    skipped = int((~keep).sum())
    if skipped:
        logger.warning("[載入] %d 份文件總詞數 < %d，已略過", skipped, MIN_DOC_LENGTH)
    if not keep.any():
        raise ValidationError("所有文件都因總詞數不足而被略過")
    kept = freq[keep].tocsr()
    kept.sort_indices()
    return Corpus(
        freq=kept,
        doc_ids=tuple(int(d) for d in np.asarray(doc_ids)[keep]),
        skipped=skipped,
    )


def write_bag_of_words(corpus: Corpus, path: str | Path) -> None:
    """以 UCI 格式寫出語料（docID 依保留順序重新編號為 1..n）。"""
    coo = corpus.freq.tocoo()
    order = np.lexsort((coo.col, coo.row))
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"{corpus.n_docs}\n{corpus.vocab_size}\n{coo.nnz}\n")
        for i in order:
            f.write(f"{coo.row[i] + 1} {coo.col[i] + 1} {int(coo.data[i])}\n")


# ====================================================================
# 節點分割
# ====================================================================

def partition_nodes(
    graph: SparseGraph,
    fractions: tuple[float, float, float, float],
    seed: int,
    k: int,
) -> NodePartition:
    """將節點隨機分割為 X、A、B、C。

    各集合大小為 floor(fraction × n)，剩餘節點併入 X。相同的
    (graph, fractions, seed) 一定得到相同的分割。

    Args:
        graph: 輸入圖
        fractions: (X, A, B, C) 的比例，各自 > 0 且總和 ≤ 1
        seed: 亂數種子
        k: 社群數，每個集合至少需要 k 個節點

    Raises:
        ConfigurationError: 比例不合法，或某集合小於 k（訊息指名該集合）
    """
    if len(fractions) != 4:
        raise ConfigurationError(f"需要 4 個比例，實際 {len(fractions)}")
    if any(f <= 0 for f in fractions):
        raise ConfigurationError(f"每個比例必須 > 0: {fractions}")
    if sum(fractions) > 1 + 1e-12:
        raise ConfigurationError(f"比例總和必須 ≤ 1: {sum(fractions)}")

    n = graph.n_nodes
    sizes = [int(np.floor(f * n)) for f in fractions]
    sizes[0] += n - sum(sizes)
    for label, size in zip(SET_LABELS, sizes):
        if size < k:
            raise ConfigurationError(
                f"集合 {label} 只有 {size} 個節點，小於 k={k}"
            )

    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    bounds = np.cumsum([0] + sizes)
    sets = [np.sort(perm[bounds[i]:bounds[i + 1]]) for i in range(4)]
    part = NodePartition(*sets, seed=seed, n_nodes=n)
    logger.debug("[分割] 集合大小 %s（seed=%d）", part.sizes(), seed)
    return part
