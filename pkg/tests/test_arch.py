import json

import numpy as np
import pytest

from amygseg import arch, rfcalc
from amygseg.errors import ConfigError, DataError, ShapeError
from amygseg.tensor import Tensor, finite_difference_check

from conftest import rand_tensor


class TestSpecs:
    def test_branch_specs_differ_only_in_dilations(self):
        normal = arch.build_branch("normal", 11)
        dilated = arch.build_branch("dilated", 11)
        ln, ld = normal.layers(), dilated.layers()
        assert len(ln) == len(ld)
        diffs = set()
        for a, b in zip(ln, ld):
            for key in a:
                if a[key] != b[key]:
                    diffs.add(key)
        assert diffs == {"dilation"}

    def test_dilated_schedule_matches_stage_listing(self):
        spec = arch.build_branch("dilated", 11)
        dils = [e["dilation"] for e in spec.layers() if e["stage"] == "block"]
        assert dils == [2, 4, 2, 8, 2, 4, 2, 1]

    def test_four_blocks_thirty_in_fifty_out(self):
        spec = arch.build_branch("normal", 11)
        assert spec.num_blocks == 4
        assert spec.initial_channels == 30
        assert spec.channel_schedule[0][0] == 30
        assert spec.channel_schedule[-1][1] == 50

    def test_block_receptive_fields_hit_paper_targets(self):
        for mode, want in (("normal", 17), ("dilated", 51)):
            spec = arch.build_branch(mode, 11)
            chain = rfcalc.descriptors_from_network_layers(spec.layers())
            assert rfcalc.receptive_field_chain(chain, l0=1).final == want

    def test_fusion_counts(self):
        dual = arch.build_amygnet(11)
        assert arch.count_fusions(dual) == 8
        assert arch.count_fusions(arch.build_branch("normal", 11)) == 0
        # two fusion groups per block
        per_block = {}
        for e in dual.layers():
            if e["fusion_group"] is not None:
                block = e["name"].split("/")[1][:2]
                per_block.setdefault(block, set()).add(e["fusion_group"])
        assert all(len(groups) == 2 for groups in per_block.values())
        assert len(per_block) == 4

    def test_interchange_round_trip(self):
        spec = arch.build_amygnet(11)
        doc = json.loads(json.dumps(spec.to_json_dict()))
        assert arch.NetworkSpec.from_json_dict(doc) == spec

    def test_from_json_rejects_bad_format(self):
        with pytest.raises(DataError):
            arch.NetworkSpec.from_json_dict({"format": "something-else"})

    def test_invalid_mode_and_classes_rejected(self):
        with pytest.raises(ConfigError):
            arch.build_branch("dual", 11)
        with pytest.raises(ConfigError):
            arch.build_amygnet(1)

    def test_reshape_skips_exactly_where_channels_change(self):
        spec = arch.build_branch("normal", 11)
        assert [b.has_reshape for b in spec.blocks] == [False, True, False, True]


class TestInstantiate:
    def test_same_seed_is_bit_identical(self):
        a = arch.instantiate(arch.build_amygnet(11), seed=5)
        b = arch.instantiate(arch.build_amygnet(11), seed=5)
        assert a.params.keys() == b.params.keys()
        for name in a.params:
            assert np.array_equal(a.params[name].data, b.params[name].data)

    def test_different_seeds_differ(self):
        a = arch.instantiate(arch.build_amygnet(11), seed=5)
        b = arch.instantiate(arch.build_amygnet(11), seed=6)
        assert any(
            not np.array_equal(a.params[n].data, b.params[n].data) for n in a.params
        )

    def test_parameter_count_matches_closed_form(self):
        # hand sum over the layer schedule: conv = out*in*k^3 + out
        def conv(out, cin, k=3):
            return out * cin * k**3 + out

        expected = (
            conv(30, 1)  # stem
            + conv(30, 30) + conv(30, 30)  # block 1
            + conv(40, 30) + conv(40, 40) + conv(40, 30, k=1)  # block 2 + reshape
            + conv(40, 40) + conv(40, 40)  # block 3
            + conv(50, 40) + conv(50, 50) + conv(50, 40, k=1)  # block 4 + reshape
            + conv(150, 50, k=1) + conv(150, 150, k=1) + conv(11, 150, k=1)  # head
        )
        model = arch.instantiate(arch.build_branch("normal", 11), seed=0)
        assert model.parameter_count() == expected

    def test_biases_start_at_zero(self):
        model = arch.instantiate(arch.build_branch("dilated", 11), seed=1)
        assert all(
            not t.data.any() for n, t in model.params.items() if n.endswith(".b")
        )


class TestForward:
    def test_output_shape_matches_contract(self):
        model = arch.instantiate(arch.build_amygnet(11), seed=2)
        logits = arch.forward(model, rand_tensor((1, 24, 24, 24), seed=1))
        assert logits.shape == (11, 24, 24, 24)

    def test_spatial_shape_preserved_for_odd_sizes(self):
        model = arch.instantiate(arch.build_amygnet(7, num_blocks=2), seed=2)
        logits = arch.forward(model, rand_tensor((1, 5, 9, 7), seed=1))
        assert logits.shape == (7, 5, 9, 7)

    def test_zero_input_gives_zero_logits(self):
        # biases start at zero, so conv(0) = 0 and relu(0) = 0 throughout
        model = arch.instantiate(arch.build_amygnet(11), seed=3)
        logits = arch.forward(model, Tensor.zeros((1, 8, 8, 8)))
        assert not logits.data.any()

    def test_bad_patch_shape_rejected(self):
        model = arch.instantiate(arch.build_branch("normal", 11), seed=3)
        with pytest.raises(ShapeError):
            arch.forward(model, rand_tensor((2, 8, 8, 8)))

    def test_residual_block_with_zero_convs_is_identity(self):
        # zero both convs of one same-channel block: it must pass its input through
        spec = arch.build_branch("normal", 11)
        model = arch.instantiate(spec, seed=4)
        x = Tensor(np.abs(np.random.default_rng(0).standard_normal((1, 6, 6, 6))).astype(np.float32))

        def stem_and_block1(model):
            ops = arch._ArrayOps(model)
            t = ops.relu(ops.conv(x.data, "init", 1))
            u = ops.conv(t, "b1c1", 1)
            a = ops.relu(u)
            v = ops.conv(a, "b1c2", 1)
            return t, ops.relu(ops.add(v, t))

        model.params["b1c1.w"] = Tensor.zeros(model.params["b1c1.w"].shape)
        model.params["b1c2.w"] = Tensor.zeros(model.params["b1c2.w"].shape)
        t_in, block_out = stem_and_block1(model)
        assert np.array_equal(block_out, t_in)

    def test_forward_deterministic_across_calls(self):
        model = arch.instantiate(arch.build_amygnet(11), seed=5)
        patch = rand_tensor((1, 12, 12, 12), seed=9)
        a = arch.forward(model, patch)
        b = arch.forward(model, patch)
        assert np.array_equal(a.data, b.data)


class TestDualTopology:
    def test_training_graph_has_8_fusion_nodes_2_per_block(self):
        model = arch.instantiate(arch.build_amygnet(11), seed=6)
        patch = rand_tensor((1, 6, 6, 6), seed=0)
        labels = np.zeros((6, 6, 6), dtype=np.int64)
        graph, _, _ = arch.build_training_graph(model, patch, labels)
        fusions = [n for n in graph.nodes if n.op == "add" and n.attrs.get("tag") == "fusion"]
        assert len(fusions) == 8
        for node in fusions:
            a, b = (graph.nodes[i] for i in node.inputs)
            assert a.value.shape == b.value.shape == node.value.shape

    def test_single_branch_graph_has_no_fusion_nodes(self):
        model = arch.instantiate(arch.build_branch("normal", 11), seed=6)
        patch = rand_tensor((1, 6, 6, 6), seed=0)
        graph, _, _ = arch.build_training_graph(model, patch, np.zeros((6, 6, 6), dtype=np.int64))
        assert arch.count_fusion_nodes(graph) == 0

    def test_zeroed_dilated_branch_reduces_to_normal_branch(self):
        """With every dilated-branch parameter zeroed, the dual net tracks a
        pure normal branch exactly, except where a dilated-branch identity
        skip (same-channel block on the shared stream, i.e. block 3) re-adds
        the fused block input and doubles that skip term. The reference below
        is the normal branch with exactly that one doubling applied."""
        num_classes = 11
        dual = arch.instantiate(arch.build_amygnet(num_classes), seed=7)
        for name in list(dual.params):
            if name.startswith("dilated/"):
                dual.params[name] = Tensor.zeros(dual.params[name].shape)

        single = arch.instantiate(arch.build_branch("normal", num_classes), seed=8)
        for name in list(single.params):
            if name.startswith(("fc1.", "fc2.", "cls.")):
                single.params[name] = dual.params[name].copy()
            else:
                single.params[name] = dual.params["normal/" + name].copy()

        x = rand_tensor((1, 8, 8, 8), seed=10)
        got = arch.forward(dual, x).data

        ops = arch._ArrayOps(single)
        blocks = single.spec.blocks
        t = ops.relu(ops.conv(x.data, "init", 1))
        for k, blk in enumerate(blocks, start=1):
            a = ops.relu(ops.conv(t, f"b{k}c1", 1))
            v = ops.conv(a, f"b{k}c2", 1)
            skip = ops.conv(t, f"b{k}skip", 1) if blk.has_reshape else t
            extra = t if (not blk.has_reshape and k > 1) else 0.0
            t = ops.relu(v + skip + extra)
        h = ops.relu(ops.conv(t, "fc1", 1))
        h = ops.relu(ops.conv(h, "fc2", 1))
        want = ops.conv(h, "cls", 1)
        np.testing.assert_array_equal(got, want)

    def test_one_block_dual_gradient_check(self):
        model = arch.instantiate(arch.build_amygnet(5, num_blocks=1), seed=9, dtype=np.float64)
        patch = rand_tensor((1, 6, 6, 6), seed=3, dtype=np.float64)
        labels = np.random.default_rng(4).integers(0, 5, size=(6, 6, 6))
        graph, _, pnodes = arch.build_training_graph(model, patch, labels)
        for name in ("normal/init.w", "dilated/b1c1.w", "normal/b1c2.b", "fc2.w", "cls.w"):
            assert finite_difference_check(graph, pnodes[name], eps=1e-5, max_entries=8) < 1e-4


class TestCheckpoints:
    def test_round_trip_is_bit_exact(self, tmp_path):
        model = arch.instantiate(arch.build_amygnet(11), seed=11)
        path = tmp_path / "model.ckpt"
        arch.save_checkpoint(model, path, epoch=17)
        loaded, epoch = arch.load_checkpoint(path)
        assert epoch == 17
        assert loaded.seed == 11
        assert loaded.spec == model.spec
        for name in model.params:
            assert np.array_equal(loaded.params[name].data, model.params[name].data)

    def test_save_is_deterministic(self, tmp_path):
        model = arch.instantiate(arch.build_branch("dilated", 11), seed=12)
        arch.save_checkpoint(model, tmp_path / "a.ckpt", epoch=1)
        arch.save_checkpoint(model, tmp_path / "b.ckpt", epoch=1)
        assert arch.checkpoint_digest(tmp_path / "a.ckpt") == arch.checkpoint_digest(
            tmp_path / "b.ckpt"
        )

    def test_magic_and_truncation_errors(self, tmp_path):
        model = arch.instantiate(arch.build_branch("normal", 11, num_blocks=1), seed=1)
        path = tmp_path / "model.ckpt"
        arch.save_checkpoint(model, path, epoch=0)
        raw = path.read_bytes()

        bad_magic = tmp_path / "bad.ckpt"
        bad_magic.write_bytes(b"XXXXX" + raw[5:])
        with pytest.raises(DataError):
            arch.load_checkpoint(bad_magic)

        truncated = tmp_path / "short.ckpt"
        truncated.write_bytes(raw[:-20])
        with pytest.raises(DataError) as err:
            arch.load_checkpoint(truncated)
        assert "truncated" in str(err.value)
