import numpy as np
import pytest
import torch

from dalf.errors import FormatError
from dalf.inference import (KeypointSet, MatchSet, decode_descriptors, detect, encode_descriptors,
                            extract, load_descriptors, match_nn, nms, ratio_top_n,
                            save_descriptors)
from dalf.network import DALFNet, ModelConfig
from dalf.synthgen import procedural_texture


@pytest.fixture(scope="module")
def state():
    torch.manual_seed(0)
    model = DALFNet()
    with torch.no_grad():
        model.decoder.head.bias.fill_(1.0)
    return model.eval()


@pytest.fixture(scope="module")
def image():
    return procedural_texture(np.random.default_rng(5), 96).astype(np.float32)


def _unit(n, d, rng):
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def test_nms_impulse_and_constant():
    hm = np.zeros((9, 9))
    hm[4, 6] = 3.0
    coords, scores = nms(hm)
    assert coords.tolist() == [[6.0, 4.0]]
    assert scores[0] == pytest.approx(1 / (1 + np.exp(-3.0)))
    assert len(nms(np.full((9, 9), 2.0))[0]) == 0


def test_nms_separation():
    # a 3x3 window suppresses only immediate neighbours
    hm = np.full((11, 11), -1.0)
    hm[5, 3], hm[5, 4] = 5.0, 4.0
    assert nms(hm)[0].tolist() == [[3.0, 5.0]]
    hm[5, 4], hm[6, 4] = -1.0, 4.0
    assert nms(hm)[0].tolist() == [[3.0, 5.0]]
    hm[6, 4], hm[5, 5] = -1.0, 4.0
    assert nms(hm)[0].tolist() == [[3.0, 5.0], [5.0, 5.0]]
    assert nms(hm, window=5)[0].tolist() == [[3.0, 5.0]]


def test_nms_rejects_nonpositive_and_separates():
    rng = np.random.default_rng(0)
    hm = rng.normal(size=(40, 40))
    coords, scores = nms(hm)
    assert np.all(hm[coords[:, 1].astype(int), coords[:, 0].astype(int)] > 0)
    d = np.abs(coords[:, None, :] - coords[None, :, :]).max(-1)
    np.fill_diagonal(d, 99)
    assert d.min() >= 2


def test_detect_sorted_deterministic_topk(state, image):
    k1 = detect(state, image, top_k=50)
    k2 = detect(state, image, top_k=50)
    assert 0 < len(k1) <= 50
    assert np.array_equal(k1.coords, k2.coords) and np.array_equal(k1.scores, k2.scores)
    assert np.all(np.diff(k1.scores) <= 0)
    assert np.all((k1.scores > 0.5) & (k1.scores < 1))
    everything = detect(state, image, top_k=10**6)
    assert len(everything) == len(nms(state.backbone(torch.from_numpy(image)[None, None])
                                      .heatmap[0])[0])


def test_detect_mask(state, image):
    mask = np.zeros(image.shape, bool)
    mask[:, :48] = True
    kps = detect(state, image, top_k=10**6, mask=mask)
    assert len(kps) > 0 and np.all(kps.coords[:, 0] < 48)


def test_extract_unit_and_equivariant(state, image):
    kps = detect(state, image, top_k=30)
    d = extract(state, image, kps)
    assert d.kind == "fused" and d.rows.shape == (len(kps), 128)
    np.testing.assert_allclose(d.rows.norm(dim=1).numpy(), 1.0, atol=1e-6)
    perm = np.random.default_rng(0).permutation(len(kps))
    dp = extract(state, image, kps.coords[perm])
    np.testing.assert_allclose(dp.rows.numpy(), d.rows.numpy()[perm], atol=1e-6)
    assert torch.equal(extract(state, image, kps).rows, d.rows)


def test_extract_single_kind():
    model = DALFNet(ModelConfig(descriptor="distinct")).eval()
    d = extract(model, np.zeros((64, 64), np.float32), np.array([[10.0, 20.0]]))
    assert d.kind == "distinct" and d.dim == 64
    assert len(extract(model, np.zeros((64, 64), np.float32), np.zeros((0, 2)))) == 0


def test_match_identity():
    a = _unit(20, 8, np.random.default_rng(0))
    m = match_nn(a, a)
    assert m.index_b.tolist() == list(range(20))
    np.testing.assert_allclose(m.distances, 0.0, atol=1e-6)


def test_match_brute_force():
    rng = np.random.default_rng(1)
    for _ in range(3):
        a, b = _unit(200, 16, rng), _unit(200, 16, rng)
        m = match_nn(a, b)
        for i in range(200):
            dist = [np.sqrt(max(0.0, 2 - 2 * float(a[i] @ b[j]))) for j in range(200)]
            order = np.argsort(dist, kind="stable")
            assert m.index_a[i] == i and m.index_b[i] == order[0]
            assert m.distances[i] == pytest.approx(dist[order[0]], abs=1e-12)
            assert m.ratios[i] == pytest.approx(dist[order[0]] / dist[order[1]], abs=1e-12)
        assert np.all((m.ratios >= 0) & (m.ratios <= 1))


def test_mutual_subset():
    rng = np.random.default_rng(2)
    a, b = _unit(60, 8, rng), _unit(40, 8, rng)
    one = set(map(tuple, match_nn(a, b).pairs.tolist()))
    mut = match_nn(a, b, mutual=True)
    assert set(map(tuple, mut.pairs.tolist())) <= one
    assert np.all(np.diff(mut.index_a) > 0)
    back = match_nn(b, a)
    for ia, ib in mut.pairs:
        assert back.index_b[ib] == ia


def test_match_edge_cases():
    assert len(match_nn(np.zeros((0, 4)), _unit(3, 4, np.random.default_rng(0)))) == 0
    single = match_nn(_unit(3, 4, np.random.default_rng(0)), _unit(1, 4, np.random.default_rng(1)))
    assert single.ratios.tolist() == [0.0, 0.0, 0.0]
    with pytest.raises(ValueError):
        match_nn(np.ones((2, 3)), np.ones((2, 4)))


def test_ratio_top_n():
    rng = np.random.default_rng(3)
    m = match_nn(_unit(50, 8, rng), _unit(50, 8, rng))
    assert ratio_top_n(m, 100) is m
    assert len(ratio_top_n(m, 0)) == 0
    top = ratio_top_n(m, 10)
    np.testing.assert_array_equal(np.sort(top.ratios), np.sort(m.ratios)[:10])
    assert np.all(np.diff(top.index_a) > 0)


def test_keypoint_file_round_trip(tmp_path):
    kp = KeypointSet(np.array([[1.0, 2.0], [3.5, 4.0]]), np.array([0.9, 0.6]))
    kp.save(tmp_path / "k.txt")
    assert (tmp_path / "k.txt").read_text().startswith("DALFKP 1 2\n")
    back = KeypointSet.load(tmp_path / "k.txt")
    assert np.array_equal(back.coords, kp.coords) and np.array_equal(back.scores, kp.scores)
    (tmp_path / "bad.txt").write_text("DALFKP 1 3\n1 2 0.5\n")
    with pytest.raises(FormatError):
        KeypointSet.load(tmp_path / "bad.txt")


def test_match_file_round_trip(tmp_path):
    m = MatchSet(np.array([0, 2]), np.array([5, 1]), np.array([0.1, 0.25]), np.array([0.5, 0.9]))
    m.save(tmp_path / "m.txt")
    back = MatchSet.load(tmp_path / "m.txt")
    assert np.array_equal(back.pairs, m.pairs) and np.array_equal(back.ratios, m.ratios)
    assert (tmp_path / "m.txt").read_text().splitlines()[0] == "0 5 0.1 0.5"


def test_descriptor_file(tmp_path):
    rows = _unit(7, 5, np.random.default_rng(0)).astype(np.float32)
    blob = encode_descriptors(rows)
    assert blob[:8] == b"DALFDESC" and blob[8] == 1 and len(blob) == 17 + 7 * 5 * 4
    np.testing.assert_array_equal(decode_descriptors(blob), rows)
    save_descriptors(tmp_path / "d.bin", rows)
    np.testing.assert_array_equal(load_descriptors(tmp_path / "d.bin"), rows)
    with pytest.raises(FormatError) as err:
        decode_descriptors(blob[:-3])
    assert err.value.offset == len(blob) - 3
    with pytest.raises(FormatError):
        decode_descriptors(b"NOTDESC!" + blob[8:])
