import numpy as np
import pytest
import torch

from gemseg.datamodel import ImageSample
from gemseg.encoder import (
    BaseFeature, FeatureAdapter, FeatureFileError, FeatureSource, ToyViT, encode, export_features, import_features,
)

from gradcheck import check_gradients


def sample(size, seed=0):
    return ImageSample("s", np.random.default_rng(seed).standard_normal((size, size, 3)).astype(np.float32),
                       (size, size))


class TestToyViT:
    @pytest.mark.parametrize("size,grid", [(384, 24), (64, 4)])
    def test_grid(self, size, grid):
        torch.manual_seed(0)
        enc = ToyViT(d_model=32, depth=1, num_heads=4, grid_size=grid)
        feat = encode(sample(size), enc)
        assert feat.shape == (grid, grid, 32) and feat.source is FeatureSource.TOY_VIT

    def test_bad_input(self):
        enc = ToyViT(d_model=16, depth=1, num_heads=2, grid_size=2)
        with pytest.raises(ValueError):
            enc(torch.zeros(1, 3, 40, 32))
        with pytest.raises(ValueError):
            enc(torch.zeros(1, 1, 32, 32))

    def test_zero_image_zero_blocks(self):
        torch.manual_seed(0)
        enc = ToyViT(d_model=16, depth=2, num_heads=2, grid_size=2)
        with torch.no_grad():
            for p in enc.blocks.parameters():
                p.zero_()
        out = enc(torch.zeros(1, 3, 32, 32))
        bias = enc.patch_embed.bias[None, :, None, None]
        tokens = (bias + enc.pos_embed).flatten(2).transpose(1, 2)
        expected = enc.norm(tokens).transpose(1, 2).reshape(1, 16, 2, 2)
        assert torch.isfinite(out).all()
        torch.testing.assert_close(out, expected)

    def test_batch_permutation(self):
        torch.manual_seed(0)
        enc = ToyViT(d_model=16, depth=1, num_heads=2, grid_size=2).eval()
        x = torch.randn(3, 3, 32, 32)
        perm = torch.tensor([2, 0, 1])
        torch.testing.assert_close(enc(x)[perm], enc(x[perm]), rtol=1e-5, atol=1e-6)

    def test_pos_embed_interpolation(self):
        enc = ToyViT(d_model=16, depth=1, num_heads=2, grid_size=4)
        assert enc(torch.zeros(1, 3, 32, 32)).shape == (1, 16, 2, 2)

    def test_gradient(self, float64):
        torch.manual_seed(0)
        enc = ToyViT(d_model=16, depth=1, num_heads=2, grid_size=2).double()
        x = torch.randn(1, 3, 32, 32, dtype=torch.float64, requires_grad=True)
        w = torch.randn(1, 16, 2, 2, dtype=torch.float64)
        params = [x, enc.patch_embed.weight, enc.blocks[0].attn.qkv.weight, enc.pos_embed]
        assert check_gradients(lambda: (enc(x) * w).sum(), params, max_coords=24) <= 1e-4


class TestFeatureFile:
    def test_round_trip(self, tmp_path):
        feat = BaseFeature(torch.randn(3, 5, 7))
        export_features(feat, tmp_path / "f.bin")
        back = import_features(tmp_path / "f.bin")
        assert back.source is FeatureSource.IMPORTED
        torch.testing.assert_close(back.feature, feat.feature, rtol=0, atol=0)

    def test_ones(self, tmp_path):
        export_features(BaseFeature(torch.ones(24, 24, 256)), tmp_path / "f.bin")
        back = import_features(tmp_path / "f.bin")
        assert back.shape == (24, 24, 256) and bool((back.feature == 1).all())

    def test_layout(self, tmp_path):
        arr = np.arange(2 * 3 * 4, dtype=np.float32).reshape(2, 3, 4)
        export_features(BaseFeature(torch.from_numpy(arr)), tmp_path / "f.bin")
        raw = (tmp_path / "f.bin").read_bytes()
        assert raw[:4] == b"GEMF"
        assert np.frombuffer(raw[4:16], "<u4").tolist() == [2, 3, 4]
        np.testing.assert_array_equal(np.frombuffer(raw[16:], "<f4"), arr.ravel())

    def test_truncated(self, tmp_path):
        export_features(BaseFeature(torch.ones(2, 2, 4)), tmp_path / "f.bin")
        raw = (tmp_path / "f.bin").read_bytes()
        (tmp_path / "t.bin").write_bytes(raw[:-4])
        with pytest.raises(FeatureFileError, match="payload"):
            import_features(tmp_path / "t.bin")
        (tmp_path / "h.bin").write_bytes(raw[:6])
        with pytest.raises(FeatureFileError):
            import_features(tmp_path / "h.bin")
        (tmp_path / "m.bin").write_bytes(b"XXXX" + raw[4:])
        with pytest.raises(FeatureFileError, match="magic"):
            import_features(tmp_path / "m.bin")

    def test_adapter(self):
        assert isinstance(FeatureAdapter(8, 8).proj, torch.nn.Identity)
        assert FeatureAdapter(12, 8)(torch.zeros(1, 12, 3, 3)).shape == (1, 8, 3, 3)
