import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ezsd import geometry as G
from ezsd.dataset import Annotation, DatasetSplit, load_dataset, make_toy_dataset
from ezsd.encoder import MockEncoder
from ezsd.proposals import (BLOB, GT_SENTINEL, MANIFEST, ClipProposal, ProposalGenConfig, StoreError,
                            candidate_anchors, dictionary_names, generate_clip_proposals, generate_store,
                            read_store, sample_training_subset, write_store)

from conftest import BASE, NOVEL

SMALL = ProposalGenConfig(resize=G.ResizeSpec(427, 256))


@pytest.fixture(scope="module")
def enc():
    return MockEncoder(0)


@pytest.fixture(scope="module")
def text(enc):
    return enc.encode_text(BASE + NOVEL)


def softmax_oracle(feature, emb, tau):
    f = feature / np.linalg.norm(feature)
    e = emb / np.linalg.norm(emb, axis=1, keepdims=True)
    z = (e @ f) / tau
    z = np.exp(z - z.max())
    return z / z.sum()


def test_blank_image(enc, text):
    out = generate_clip_proposals(np.full((64, 64, 3), 128, np.uint8), [], enc, text, SMALL)
    assert 0 < len(out) <= SMALL.top_k
    assert all(p.source == "anchor" and 0 < p.objectness <= 1 for p in out)


def test_saturated_filter_leaves_only_gt(enc, text):
    ann = Annotation(1, 1, BASE[0], G.Box(0, 0, 64, 64), 64 * 64.0)
    cfg = ProposalGenConfig(resize=G.ResizeSpec(427, 256), base_gt_filter_iou=0.0)
    out = generate_clip_proposals(np.zeros((64, 64, 3), np.uint8), [ann], enc, text, cfg)
    assert len(out) == 1
    assert out[0].source == "base_gt" and out[0].objectness == 1.0 and out[0].pred_category == GT_SENTINEL
    assert out[0].box == (0.0, 0.0, 64.0, 64.0)


@pytest.fixture(scope="module")
def toy_props(toy, enc, text):
    anns = toy.annotations_by_image()
    return {r.image_id: generate_clip_proposals(r, anns.get(r.image_id, []), enc, text, SMALL,
                                                toy.split.base_categories)
            for r in toy.images[:4]}


def test_objectness_recomputes_from_feature(toy_props, text):
    for props in toy_props.values():
        for p in props:
            if p.source != "anchor":
                continue
            s = softmax_oracle(p.feature.astype(np.float64), text, SMALL.tau)
            assert p.pred_category == int(np.argmax(s))
            assert abs(s[p.pred_category] - p.objectness) < 1e-6


def test_anchor_proposals_obey_nms_and_budget(toy, toy_props):
    anns = toy.annotations_by_image()
    for iid, props in toy_props.items():
        anchor = np.asarray([p.box for p in props if p.source == "anchor"])
        assert len(anchor) <= SMALL.top_k
        iou = G.pairwise_iou(anchor, anchor)
        np.fill_diagonal(iou, 0)
        assert iou.max() <= SMALL.nms_iou + 1e-12
        n_base = sum(a.category in BASE for a in anns.get(iid, []))
        assert sum(p.source == "base_gt" for p in props) == n_base
        # GT proposals come last and base-overlapping anchors were filtered
        srcs = [p.source for p in props]
        assert srcs == sorted(srcs, key=lambda s: s == "base_gt")
        base_boxes = [a.box.as_tuple() for a in anns.get(iid, []) if a.category in BASE]
        if base_boxes and len(anchor):
            assert G.pairwise_iou(anchor, np.asarray(base_boxes)).max() <= SMALL.base_gt_filter_iou


def test_anchors_live_in_original_frame():
    a = candidate_anchors(128, 96, SMALL)
    assert a[:, 0].min() >= 0 and a[:, 1].min() >= 0 and a[:, 2].max() <= 128 and a[:, 3].max() <= 96


def test_top_k_caps_anchor_proposals(enc, text):
    cfg = ProposalGenConfig(resize=G.ResizeSpec(427, 256), top_k=3)
    out = generate_clip_proposals(np.full((64, 64, 3), 90, np.uint8), [], enc, text, cfg)
    assert len(out) == 3
    assert [p.objectness for p in out] == sorted((p.objectness for p in out), reverse=True)


def test_novel_objects_are_covered(tmp_path, enc):
    """On single-novel-object images the best proposal by IoGT reaches 0.5 in at least 90% of 50 images."""
    root = make_toy_dataset(tmp_path, 21, 50, 128, BASE + NOVEL, {"base": BASE, "novel": NOVEL},
                            objects_per_image=(1, 1))
    d = load_dataset(root / "annotations.json", root / "split.json")
    text = enc.encode_text(BASE + NOVEL)
    anns = d.annotations_by_image()
    covered = total = 0
    for r in d.images:
        novel = [a for a in anns.get(r.image_id, []) if a.category in NOVEL]
        if not novel:
            continue
        props = generate_clip_proposals(r, anns[r.image_id], enc, text, SMALL, BASE)
        boxes = np.asarray([p.box for p in props if p.source == "anchor"])
        total += 1
        covered += G.pairwise_iogt(boxes, np.asarray([novel[0].box.as_tuple()])).max() >= 0.5
    assert total >= 10
    assert covered / total >= 0.9


def _fake(n, gt=0, dim=4, seed=0):
    r = np.random.default_rng(seed)
    out = [ClipProposal((i, i, i + 5, i + 5), float(r.uniform(0.1, 1)), int(r.integers(5)), r.normal(size=dim))
           for i in range(n)]
    out += [ClipProposal((0, 0, 9, 9), 1.0, GT_SENTINEL, r.normal(size=dim), "base_gt") for _ in range(gt)]
    return out


def test_subset_under_budget_keeps_all():
    props = _fake(150)
    assert [id(p) for p in sample_training_subset(props, ProposalGenConfig(), 3)] == [id(p) for p in props]


def test_subset_is_fixed_per_image():
    props = _fake(1000, gt=3)
    cfg = ProposalGenConfig()
    a = sample_training_subset(props, cfg, 8)
    b = sample_training_subset(props, cfg, 8)
    assert [id(p) for p in a] == [id(p) for p in b]
    assert len(a) == 200
    assert sum(p.source == "base_gt" for p in a) == 3


def test_subset_varies_with_seed():
    props = _fake(1000)
    a = sample_training_subset(props, ProposalGenConfig(seed=0), 8)
    b = sample_training_subset(props, ProposalGenConfig(seed=1), 8)
    assert len(a) == len(b) == 200
    assert {id(p) for p in a} != {id(p) for p in b}


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 400), st.integers(0, 5), st.integers(0, 300), st.integers(0, 10**6))
def test_subset_properties(n, gt, budget, image_id):
    props = _fake(n, gt)
    out = sample_training_subset(props, ProposalGenConfig(train_subset_size=budget), image_id)
    assert len(out) == min(budget, n + gt)
    pos = {id(p): i for i, p in enumerate(props)}
    idx = [pos[id(p)] for p in out]
    assert idx == sorted(set(idx))
    assert sum(p.source == "base_gt" for p in out) == min(gt, budget)


def test_dictionary_modes():
    split = DatasetSplit(("a", "b"), ("c", "d"))
    assert dictionary_names(split, ProposalGenConfig()) == ["a", "b", "c", "d"]
    cfg = ProposalGenConfig(dictionary_mode="base_plus_listed_novel", listed_novel=("d",))
    assert dictionary_names(split, cfg) == ["a", "b", "d"]
    with pytest.raises(ValueError):
        dictionary_names(split, ProposalGenConfig(dictionary_mode="base_plus_listed_novel", listed_novel=("z",)))


def test_config_round_trip():
    cfg = ProposalGenConfig(top_k=10, listed_novel=("x",), anchors=G.AnchorConfig(16, (8, 16), (1.0,)))
    assert ProposalGenConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
    with pytest.raises(ValueError):
        ProposalGenConfig(nms_iou=1.5)


# ------------------------------------------------------------------ store

def test_store_round_trip(tmp_path):
    data = {3: _fake(7, 2, dim=8), 9: [], 1: _fake(2, dim=8, seed=1)}
    write_store(tmp_path / "s", data, 8)
    again, header = read_store(tmp_path / "s", expected_dim=8)
    assert header["format_version"] == 1 and header["D"] == 8
    assert list(again) == [3, 9, 1]
    for k, props in data.items():
        assert len(again[k]) == len(props)
        assert all(p.same_as(q) for p, q in zip(props, again[k]))


def test_manifest_layout(tmp_path):
    write_store(tmp_path / "s", {5: _fake(3, dim=2), 6: _fake(2, dim=2)}, 2)
    lines = [json.loads(l) for l in (tmp_path / "s" / MANIFEST).read_text().splitlines()]
    assert len(lines) == 3
    assert lines[0]["checksum"].startswith("sha256:")
    assert lines[1]["feature_offset"] == 0 and lines[2]["feature_offset"] == 3 * 2 * 4
    assert (tmp_path / "s" / BLOB).stat().st_size == 5 * 2 * 4


def test_empty_store(tmp_path):
    write_store(tmp_path / "s", {}, 16)
    again, header = read_store(tmp_path / "s")
    assert again == {} and header["D"] == 16


def test_dimension_mismatch(tmp_path):
    write_store(tmp_path / "s", {1: _fake(2, dim=8)}, 8)
    with pytest.raises(StoreError, match="D=8"):
        read_store(tmp_path / "s", expected_dim=512)
    with pytest.raises(StoreError):
        write_store(tmp_path / "t", {1: _fake(2, dim=8)}, 4)


def test_truncated_blob(tmp_path):
    write_store(tmp_path / "s", {1: _fake(4, dim=8)}, 8)
    blob = tmp_path / "s" / BLOB
    blob.write_bytes(blob.read_bytes()[:-4])
    with pytest.raises(StoreError, match="truncated"):
        read_store(tmp_path / "s")


def test_corrupted_blob(tmp_path):
    write_store(tmp_path / "s", {1: _fake(4, dim=8)}, 8)
    blob = tmp_path / "s" / BLOB
    raw = bytearray(blob.read_bytes())
    raw[5] ^= 0xFF
    blob.write_bytes(bytes(raw))
    with pytest.raises(StoreError, match="checksum"):
        read_store(tmp_path / "s")


def test_version_mismatch(tmp_path):
    write_store(tmp_path / "s", {1: _fake(1, dim=2)}, 2)
    man = tmp_path / "s" / MANIFEST
    lines = man.read_text().splitlines()
    header = json.loads(lines[0])
    header["format_version"] = 2
    man.write_text("\n".join([json.dumps(header)] + lines[1:]) + "\n")
    with pytest.raises(StoreError, match="version"):
        read_store(tmp_path / "s")


def test_missing_store(tmp_path):
    with pytest.raises(StoreError):
        read_store(tmp_path / "nothing")


def test_generate_store_is_deterministic(toy, enc, tmp_path):
    imgs = toy.images[:3]
    generate_store(tmp_path / "a", toy, enc, SMALL, imgs)
    generate_store(tmp_path / "b", toy, enc, SMALL, imgs, workers=2)
    for name in (MANIFEST, BLOB):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    again, header = read_store(tmp_path / "a", expected_dim=enc.dim)
    assert header["dictionary"] == BASE + NOVEL
    assert sorted(again) == [r.image_id for r in imgs]
