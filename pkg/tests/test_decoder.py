import numpy as np
import pytest
import torch

from gemseg.decoder import (
    LayerPrediction, MaskDecoder, QueryOrigin, decode, mask_logits_from_embeddings, semantic_inference,
    sine_position_encoding,
)
from gemseg.dqs import SelectionResult, aggregate
from gemseg.model import build_model
from gemseg.pyramid import FeaturePyramid

from gradcheck import check_gradients


def pyramid(d=8, h=2, batch=1):
    return FeaturePyramid(torch.randn(batch, d, 4 * h, 4 * h), torch.randn(batch, d, 2 * h, 2 * h),
                          torch.randn(batch, d, h, h), torch.randn(batch, d, h // 2, h // 2))


def selection(queries):
    b, k, _ = queries.shape
    return SelectionResult(torch.zeros(b, k, dtype=torch.long), torch.zeros(b, k, 2, dtype=torch.long), queries,
                           torch.zeros(b, k))


class TestQueries:
    def test_learned_ignores_image(self):
        dec = MaskDecoder(8, 3, 1, 2)
        a = dec.init_queries(selection(torch.randn(2, 3, 8)), dqs_init=False)
        b = dec.init_queries(selection(torch.randn(2, 3, 8)), dqs_init=False)
        assert a.origin is QueryOrigin.LEARNED and torch.equal(a.content, b.content)

    def test_dqs_init_zero_features(self):
        q = MaskDecoder(8, 3, 1, 2).init_queries(selection(torch.zeros(1, 3, 8)), dqs_init=True)
        assert q.origin is QueryOrigin.DQS_INIT and bool((q.content == 0).all())

    def test_toggle_changes_content_only(self):
        dec = MaskDecoder(8, 3, 1, 2)
        sel = selection(torch.randn(1, 3, 8))
        on, off = dec.init_queries(sel, True), dec.init_queries(sel, False)
        assert torch.equal(on.positional, off.positional) and not torch.equal(on.content, off.content)

    def test_k_mismatch(self):
        with pytest.raises(ValueError):
            MaskDecoder(8, 3, 1, 2).init_queries(selection(torch.zeros(1, 4, 8)), dqs_init=True)
        with pytest.raises(ValueError):
            MaskDecoder(8, 3, 1, 2).init_queries(None, dqs_init=True)


class TestMemory:
    def test_lengths(self):
        dec = MaskDecoder(8, 3, 1, 2)
        mem = dec.flatten_memory(pyramid(8, h=4))
        assert mem.memory.shape == (1, 84, 8) and mem.positions.shape == (1, 84, 8)
        assert torch.bincount(mem.level_index).tolist() == [64, 16, 4]

    def test_384_grid(self):
        dec = MaskDecoder(8, 3, 1, 2)
        pyr = FeaturePyramid(torch.zeros(1, 8, 96, 96), torch.zeros(1, 8, 48, 48), torch.zeros(1, 8, 24, 24),
                             torch.zeros(1, 8, 12, 12))
        assert dec.flatten_memory(pyr).memory.shape[1] == 2304 + 576 + 144 == 3024

    def test_sine_encoding(self):
        pe = sine_position_encoding(3, 5, 16)
        assert pe.shape == (15, 16) and float(pe.abs().max()) <= 1.0
        assert len({tuple(r) for r in pe.round(decimals=6).tolist()}) == 15
        with pytest.raises(ValueError):
            sine_position_encoding(2, 2, 6)


class TestMaskProduct:
    def test_zero_pixel_map(self):
        assert bool((mask_logits_from_embeddings(torch.randn(1, 4, 6), torch.zeros(1, 6, 3, 3)) == 0).all())

    def test_one_hot(self):
        c2 = torch.randn(1, 5, 3, 3)
        e = torch.zeros(1, 1, 5)
        e[0, 0, 2] = 1
        torch.testing.assert_close(mask_logits_from_embeddings(e, c2)[0, 0], c2[0, 2])

    def test_hand_inner_products(self):
        e = torch.tensor([[[1.0, 2.0], [-1.0, 0.5]]])
        c2 = torch.tensor([[[[1.0, 0.0], [2.0, -1.0]], [[0.5, 1.0], [0.0, 3.0]]]])
        expected = np.zeros((2, 2, 2))
        for q in range(2):
            for i in range(2):
                for j in range(2):
                    expected[q, i, j] = sum(e[0, q, c].item() * c2[0, c, i, j].item() for c in range(2))
        np.testing.assert_allclose(mask_logits_from_embeddings(e, c2)[0].numpy(), expected)

    def test_bilinearity(self):
        e1, e2 = torch.randn(1, 3, 4, dtype=torch.float64), torch.randn(1, 3, 4, dtype=torch.float64)
        p1, p2 = torch.randn(1, 4, 2, 2, dtype=torch.float64), torch.randn(1, 4, 2, 2, dtype=torch.float64)
        f = mask_logits_from_embeddings
        torch.testing.assert_close(f(2 * e1 - e2, p1), 2 * f(e1, p1) - f(e2, p1))
        torch.testing.assert_close(f(e1, 3 * p1 + p2), 3 * f(e1, p1) + f(e1, p2))


class TestDecode:
    def test_output_structure(self):
        torch.manual_seed(0)
        dec = MaskDecoder(8, 3, num_layers=2, num_heads=2)
        pyr = pyramid(8, h=2, batch=2)
        out = decode(dec.init_queries(None, False, batch_size=2), dec.flatten_memory(pyr), pyr.c2, dec)
        assert len(out.layers) == 3 and out.last is out.layers[-1]
        last = out.last
        assert last.class_logits.shape == (2, 3, 1) and last.boxes.shape == (2, 3, 4)
        assert last.mask_logits.shape == (2, 3, 8, 8)
        assert bool(((last.boxes >= 0) & (last.boxes <= 1)).all())
        for w in out.cross_attention:
            assert w.shape == (2, 3, 16 + 4 + 1)
            torch.testing.assert_close(w.sum(-1), torch.ones(2, 3), atol=1e-6, rtol=0)

    def test_width_mismatch(self):
        dec = MaskDecoder(8, 3, 1, 2)
        pyr = pyramid(8)
        with pytest.raises(ValueError):
            dec(dec.init_queries(None, False), dec.flatten_memory(pyr), torch.zeros(1, 4, 8, 8))

    def test_gradient_one_layer(self, float64, tiny_config):
        torch.manual_seed(0)
        model = build_model(tiny_config).double()
        images = torch.randn(1, 3, 32, 32, dtype=torch.float64, requires_grad=True)
        # the selected index set is held fixed so the function is smooth
        idx = model(images).selection.indices.clone()
        loc = idx % 4
        probes = [torch.randn(1, 4, 1, dtype=torch.float64), torch.randn(1, 4, 4, dtype=torch.float64),
                  torch.randn(1, 4, 8, 8, dtype=torch.float64)]

        def loss():
            pyr = model.pyramid(model.encoder(images))
            f = aggregate(pyr.c3, pyr.c4, pyr.c5)
            scores = model.dqs_head(f).scores.gather(1, idx)
            queries = f.flatten(2).transpose(1, 2).gather(1, loc[..., None].expand(-1, -1, f.shape[1]))
            sel = SelectionResult(idx, torch.stack([loc // 2, loc % 2], -1), queries, scores)
            out = model.decoder(model.decoder.init_queries(sel, True), model.decoder.flatten_memory(pyr), pyr.c2)
            last = out.last
            return sum((p * t).sum() for p, t in zip(probes, (last.class_logits, last.boxes, last.mask_logits)))

        layer = model.decoder.layers[0]
        params = [images, layer.self_attn.in_proj_weight, layer.cross_attn.in_proj_weight, layer.ffn[0].weight,
                  model.decoder.mask_head.layers[0].weight, model.decoder.class_head.weight,
                  model.decoder.box_head.layers[2].weight, model.decoder.level_embed.weight]
        assert check_gradients(loss, params, max_coords=24) <= 1e-4


class TestSemanticInference:
    def test_all_negative_classes(self):
        pred = LayerPrediction(torch.full((1, 3, 1), -1e4), torch.zeros(1, 3, 4), torch.randn(1, 3, 2, 2))
        assert bool((semantic_inference(pred) == 0).all())

    def test_half_mask(self):
        masks = torch.full((1, 1, 4, 4), -1e4)
        masks[..., :2] = 1e4
        pred = LayerPrediction(torch.full((1, 1, 1), 1e4), torch.zeros(1, 1, 4), masks)
        prob = semantic_inference(pred)
        assert prob.shape == (1, 16, 16)
        binary = (prob >= 0.5).int()
        assert binary[0, :, :8].all() and not binary[0, :, 8:].any()

    def test_two_query_max(self, rng):
        cls = torch.randn(1, 2, 1, dtype=torch.float64)
        masks = torch.randn(1, 2, 3, 3, dtype=torch.float64)
        prob = semantic_inference(LayerPrediction(cls, torch.zeros(1, 2, 4), masks), upscale=1)[0]
        for i in range(3):
            for j in range(3):
                best = max(torch.sigmoid(cls[0, q, 0]).item() * torch.sigmoid(masks[0, q, i, j]).item()
                           for q in range(2))
                assert prob[i, j].item() == pytest.approx(best, abs=1e-12)
