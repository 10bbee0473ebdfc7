import numpy as np
import pytest
import torch

from gazedrive.attention import AttentionMap
from gazedrive.commands import GAZE_COMMANDS, HighLevelCommand
from gazedrive.metrics import MetricConfig, kl_divergence
from gazedrive.model import (
    AgentConfig,
    DrivingAgent,
    GazeNet,
    GazeNetConfig,
    VARIANTS,
    agent_forward,
    agent_loss,
    agent_train_step,
    build_agent_frames,
    build_gaze_frames,
    evaluate_agent,
    evaluate_gaze,
    gaze_forward,
    gaze_loss,
    gaze_train_step,
    grad_check,
    train_agent,
    train_gaze,
)
from gazedrive.model.data import AgentFrames, mean_map_of
from gazedrive.model.evaluate import agent_eval_fn
from gazedrive.model.train import coarse_full_loss, crop_losses, sgd
from gazedrive.synth import generate

from helpers import oracle_field, oracle_kl, oracle_multitask

SMALL_GAZE = dict(input_size=(32, 32), coarse_size=(8, 8), coarse_channels=(4, 4), refine_channels=(4,))


def gaze_batch(B, cfg, seed=0, commands=None):
    g = torch.Generator().manual_seed(seed)
    W, H = cfg.input_size
    dtype = torch.float64 if cfg.dtype == "float64" else torch.float32
    clips = torch.rand(B, cfg.clip_length, cfg.channels, H, W, generator=g, dtype=torch.float64).to(dtype)
    rng = np.random.default_rng(seed)
    truths = []
    for _ in range(B):
        f = oracle_field([tuple(rng.uniform(2, W - 2, 2))], W, H, W / 20 * 2)
        truths.append(f / f.sum())
    commands = commands or [GAZE_COMMANDS[k % 4] for k in range(B)]
    return clips, commands, torch.as_tensor(np.stack(truths), dtype=dtype)


def agent_batch(B, cfg, seed=0, commands=None):
    g = torch.Generator().manual_seed(seed)
    W, H = cfg.image_size
    dtype = torch.float64 if cfg.dtype == "float64" else torch.float32
    images = tuple(torch.rand(B, cfg.channels, H, W, generator=g, dtype=torch.float64).to(dtype) for _ in range(cfg.n_inputs))
    speed = (torch.rand(B, generator=g, dtype=torch.float64) * 8).to(dtype)
    targets = torch.stack(
        [
            torch.rand(B, generator=g, dtype=torch.float64) * 2 - 1,
            torch.rand(B, generator=g, dtype=torch.float64),
            torch.rand(B, generator=g, dtype=torch.float64),
            torch.rand(B, generator=g, dtype=torch.float64) * 8,
        ],
        dim=1,
    ).to(dtype)
    commands = commands if commands is not None else [k % 5 for k in range(B)]
    return images, speed, commands, targets


def branch_params(model, keep):
    """Parameters exclusive to branches other than ``keep``."""
    return {n: p for n, p in model.named_parameters() if n.startswith("branches.") and not n.startswith(f"branches.{keep}.")}


class TestGradCheck:
    def test_dense_layer_squared_loss(self):
        torch.manual_seed(0)
        layer = torch.nn.Linear(6, 3).double()
        x, y = torch.randn(5, 6, dtype=torch.float64), torch.randn(5, 3, dtype=torch.float64)
        err = grad_check(layer, lambda m, s: ((m(s[0]) - s[1]) ** 2).sum(), (x, y), n_params=21)
        assert err < 1e-6

    @pytest.mark.parametrize("second_stream", [False, True])
    def test_gaze_branch_with_crop_stream(self, second_stream):
        cfg = GazeNetConfig(dtype="float64", second_stream=second_stream, **SMALL_GAZE)
        model = GazeNet.create(cfg)
        clips, _, truths = gaze_batch(1, cfg)
        batch = (clips, [HighLevelCommand.LEFT], truths)

        def loss_fn(m, b):
            return gaze_loss(m, b, np.random.default_rng(3))

        sub = model.branch(HighLevelCommand.LEFT)
        wrapper = torch.nn.Module()
        wrapper.branch = sub
        err = grad_check(wrapper, lambda w, b: loss_fn(model, b), batch, n_params=60)
        assert err < 1e-4

    @pytest.mark.parametrize("variant", VARIANTS)
    def test_agent_variants(self, variant):
        cfg = AgentConfig(variant=variant, dtype="float64", image_size=(32, 32))
        model = DrivingAgent.create(cfg)
        batch = agent_batch(1, cfg, commands=[HighLevelCommand.RIGHT])
        err = grad_check(model, agent_loss, batch, n_params=64)
        assert err < 1e-4

    def test_non_finite_loss_raises(self):
        layer = torch.nn.Linear(2, 1).double()
        with pytest.raises(FloatingPointError):
            grad_check(layer, lambda m, s: m(s).sum() * float("nan"), torch.ones(1, 2, dtype=torch.float64))


class TestGazeNet:
    def test_output_is_valid_attention_map(self):
        cfg = GazeNetConfig(second_stream=True)
        model = GazeNet.create(cfg)
        clip = np.random.default_rng(0).random((4, 3, 64, 64))
        for cmd in GAZE_COMMANDS:
            m = gaze_forward(clip, cmd, model)
            assert isinstance(m, AttentionMap)
            assert m.shape == (64, 64)
            clips, _, _ = gaze_batch(2, cfg)
            probs = model(clips, [cmd, cmd])
            assert torch.all(probs >= 0)
            assert torch.allclose(probs.double().flatten(1).sum(1), torch.ones(2, dtype=torch.float64), atol=1e-6)

    def test_errors(self):
        model = GazeNet.create(GazeNetConfig(**SMALL_GAZE))
        clip = np.zeros((4, 3, 32, 32))
        with pytest.raises(ValueError):
            gaze_forward(clip, HighLevelCommand.NO_COMMAND, model)
        with pytest.raises(ValueError):
            gaze_forward(np.zeros((3, 3, 32, 32)), HighLevelCommand.FOLLOW, model)
        with pytest.raises(ValueError):
            gaze_loss(model, (torch.zeros(0, 4, 3, 32, 32), [], torch.zeros(0, 32, 32)), np.random.default_rng(0))
        with pytest.raises(ValueError):
            GazeNetConfig(input_size=(16, 16), coarse_size=(32, 32))
        with pytest.raises(ValueError):
            GazeNetConfig(clip_length=0)

    def test_branch_isolation_gradients(self):
        cfg = GazeNetConfig(second_stream=True, **SMALL_GAZE)
        model = GazeNet.create(cfg)
        clips, _, truths = gaze_batch(3, cfg)
        gaze_loss(model, (clips, [HighLevelCommand.RIGHT] * 3, truths), np.random.default_rng(0)).backward()
        others = branch_params(model, "right")
        assert others
        for p in others.values():
            assert p.grad is None or torch.count_nonzero(p.grad) == 0
        assert any(p.grad is not None and p.grad.abs().sum() > 0 for n, p in model.named_parameters() if n.startswith("branches.right."))

    def test_optimizer_step_leaves_other_branches_unchanged(self):
        cfg = GazeNetConfig(**SMALL_GAZE)
        model = GazeNet.create(cfg)
        before = {n: p.detach().clone() for n, p in model.named_parameters()}
        clips, _, truths = gaze_batch(2, cfg)
        gaze_train_step((clips, [HighLevelCommand.STRAIGHT] * 2, truths), model, sgd(model, 0.1), np.random.default_rng(0))
        for n, p in model.named_parameters():
            if n.startswith("branches.straight."):
                continue
            assert torch.equal(p, before[n]), n
        assert any(not torch.equal(p, before[n]) for n, p in model.named_parameters() if n.startswith("branches.straight."))

    def test_degenerate_crop_equals_coarse_full_loss(self):
        cfg = GazeNetConfig(input_size=(16, 16), coarse_size=(16, 16), dtype="float64")
        model = GazeNet.create(cfg)
        clips, _, truths = gaze_batch(3, cfg)
        stream = model.branch(HighLevelCommand.FOLLOW).rgb
        with torch.no_grad():
            crop = crop_losses(stream, clips, truths, [(0, 0)] * 3, (16, 16), cfg.epsilon).mean()
            full = coarse_full_loss(stream, clips, truths, (16, 16), cfg.epsilon)
        assert abs(crop.item() - full.item()) < 1e-12

    def test_disabling_crop_stream_changes_gradient(self):
        cfg = GazeNetConfig(dtype="float64", **SMALL_GAZE)
        model = GazeNet.create(cfg)
        batch = gaze_batch(4, cfg)

        def grads(crop):
            model.zero_grad(set_to_none=True)
            gaze_loss(model, batch, np.random.default_rng(1), crop=crop).backward()
            return torch.cat([p.grad.flatten() for p in model.parameters() if p.grad is not None])

        assert float((grads(True) - grads(False)).abs().max()) > 0

    def test_zero_mass_crops_contribute_nothing(self):
        cfg = GazeNetConfig(dtype="float64", **SMALL_GAZE)
        model = GazeNet.create(cfg)
        clips, _, _ = gaze_batch(2, cfg)
        truths = torch.zeros(2, 32, 32, dtype=torch.float64)
        truths[:, 0, 0] = 1.0
        stream = model.branch(HighLevelCommand.FOLLOW).rgb
        with torch.no_grad():
            out = crop_losses(stream, clips, truths, [(20, 20), (0, 0)], (8, 8), cfg.epsilon)
        assert float(out[0]) == 0.0 and float(out[1]) > 0.0

    def test_overfit_fixed_batch(self):
        _, ep = generate(0, 60)
        frames = build_gaze_frames([ep])
        frames = frames.subset(np.linspace(10, len(frames) - 1, 8).astype(int))
        cfg = GazeNetConfig(lr=0.1, seed=0)
        model = GazeNet.create(cfg)
        batch = frames.batch(range(8), torch.float32)
        opt = sgd(model, cfg.lr)
        rng = np.random.default_rng(0)
        losses = [gaze_train_step(batch, model, opt, rng) for _ in range(200)]
        assert losses[-1] < 0.5 * losses[0]

    def test_training_is_deterministic(self):
        _, ep = generate(1, 40)
        frames = build_gaze_frames([ep])

        def run():
            model = GazeNet.create(GazeNetConfig(seed=3))
            losses = train_gaze(model, frames, steps=5, batch_size=4, seed=7)
            return losses, [p.detach().clone() for p in model.parameters()]

        (la, pa), (lb, pb) = run(), run()
        assert la == lb
        assert all(torch.equal(a, b) for a, b in zip(pa, pb))

    def test_shared_warmup_copies_follow_branch(self):
        _, ep = generate(2, 40)
        frames = build_gaze_frames([ep])
        model = GazeNet.create(GazeNetConfig(shared_warmup_steps=3))
        train_gaze(model, frames, steps=3, batch_size=4)
        ref = model.branch(HighLevelCommand.FOLLOW).state_dict()
        for cmd in GAZE_COMMANDS:
            for k, v in model.branch(cmd).state_dict().items():
                assert torch.equal(v, ref[k])


class TestAgent:
    def test_output_ranges(self):
        for variant in VARIANTS:
            cfg = AgentConfig(variant=variant, image_size=(32, 32))
            model = DrivingAgent.create(cfg)
            with torch.no_grad():
                for p in model.parameters():
                    p.mul_(50.0)
            images, speed, commands, _ = agent_batch(16, cfg)
            out = model(images, speed, commands)
            assert torch.all(out[:, 0].abs() <= 1)
            assert torch.all((out[:, 1:3] >= 0) & (out[:, 1:3] <= 1))
            assert torch.all(out[:, 3] >= 0)

    def test_non_selected_heads_get_zero_gradient(self):
        cfg = AgentConfig(image_size=(32, 32))
        model = DrivingAgent.create(cfg)
        agent_loss(model, agent_batch(4, cfg, commands=[HighLevelCommand.LEFT] * 4)).backward()
        for k, head in enumerate(model.heads):
            g = torch.cat([p.grad.flatten() if p.grad is not None else torch.zeros(1) for p in head.parameters()])
            if k == int(HighLevelCommand.LEFT):
                assert g.abs().sum() > 0
            else:
                assert torch.count_nonzero(g) == 0

    def test_no_command_routes_to_fifth_head(self):
        cfg = AgentConfig(image_size=(32, 32))
        model = DrivingAgent.create(cfg)
        images, speed, _, _ = agent_batch(2, cfg)
        cmds = [HighLevelCommand.NO_COMMAND] * 2
        before = model(images, speed, cmds).detach().clone()
        others = [model(images, speed, [c] * 2).detach().clone() for c in range(4)]
        with torch.no_grad():
            model.heads[4][-1].bias.add_(1.0)
        assert not torch.equal(model(images, speed, cmds), before)
        for c in range(4):
            assert torch.equal(model(images, speed, [c] * 2), others[c])

    def test_zero_weight_tasks_give_zero_head_gradient(self):
        cfg = AgentConfig(image_size=(32, 32), task_weights=(1.0, 0.0, 1.0, 0.0))
        model = DrivingAgent.create(cfg)
        agent_loss(model, agent_batch(4, cfg, commands=[0] * 4)).backward()
        last = model.heads[0][-1]
        for row in (1, 3):
            assert torch.count_nonzero(last.weight.grad[row]) == 0
            assert last.bias.grad[row] == 0
        assert last.weight.grad[0].abs().sum() > 0

    def test_dual_second_input_sensitivity(self):
        cfg = AgentConfig(variant="dual", image_size=(32, 32))
        model = DrivingAgent.create(cfg)
        (raw, _), speed, cmds, _ = agent_batch(2, cfg)
        zeros = torch.zeros_like(raw)
        with torch.no_grad():
            a = model((raw, zeros), speed, cmds)
            b = model((raw, torch.rand_like(raw)), speed, cmds)
        assert float((a - b).abs().max()) > 0

    def test_agent_forward_errors(self):
        cfg = AgentConfig(variant="dual", image_size=(32, 32))
        model = DrivingAgent.create(cfg)
        img = np.zeros((32, 32, 3))
        with pytest.raises(ValueError):
            agent_forward((img,), 1.0, HighLevelCommand.FOLLOW, model)
        with pytest.raises(ValueError):
            agent_forward((img, img), -1.0, HighLevelCommand.FOLLOW, model)
        with pytest.raises(ValueError):
            agent_forward((img, np.zeros((16, 16, 3))), 1.0, HighLevelCommand.FOLLOW, model)
        ctrl, speed = agent_forward((img, img), 2.0, HighLevelCommand.NO_COMMAND, model)
        ctrl.validate()
        assert speed == ctrl.speed
        with pytest.raises(ValueError):
            AgentConfig(variant="triple")
        with pytest.raises(ValueError):
            agent_loss(model, agent_batch(0, cfg))

    def test_overfit_fixed_batch(self):
        _, ep = generate(0, 200)
        frames = build_agent_frames(ep, "raw")
        batch = frames.batch(np.linspace(0, 199, 8).astype(int), torch.float32)
        cfg = AgentConfig(lr=0.05, seed=0)
        model = DrivingAgent.create(cfg)
        opt = sgd(model, cfg.lr)
        losses = [agent_train_step(batch, model, opt) for _ in range(500)]
        assert losses[-1] < 0.1 * losses[0]

    def test_training_is_deterministic(self):
        def run():
            cfg = AgentConfig(image_size=(32, 32), seed=4)
            model = DrivingAgent.create(cfg)
            opt = sgd(model, cfg.lr)
            traj = []
            for step in range(5):
                agent_train_step(agent_batch(4, cfg, seed=step), model, opt)
                traj.append([p.detach().clone() for p in model.parameters()])
            return traj

        a, b = run(), run()
        for pa, pb in zip(a, b):
            assert all(torch.equal(x, y) for x, y in zip(pa, pb))


@pytest.fixture(scope="module")
def small_episode():
    return generate(5, 80)[1]


class TestEvaluate:
    def test_perfect_gaze_predictor(self, small_episode):
        frames = build_gaze_frames([small_episode])
        report = evaluate_gaze(frames.truths, frames)
        assert report.overall.kl < 1e-4 and report.overall.cc > 0.999
        assert report.overall.frames == len(frames)

    def test_uniform_predictor_matches_direct_computation(self, small_episode):
        frames = build_gaze_frames([small_episode])
        u = AttentionMap.uniform(64, 64)
        report = evaluate_gaze(lambda i: u, frames)
        direct = np.mean([oracle_kl(t.values, u.values, 1e-7) for t in frames.truths])
        assert abs(report.overall.kl - direct) < 1e-9
        assert np.isnan(report.overall.cc)  # undefined against a constant map

    def test_center_prior_and_driving_split(self, small_episode):
        frames = build_gaze_frames([small_episode])
        prior = mean_map_of([frames.truths])
        report = evaluate_gaze([prior] * len(frames), frames)
        drive = [i for i, lab in enumerate(frames.labels) if lab == "driving"]
        expected = np.mean([kl_divergence(frames.truths[i], prior) for i in drive])
        assert report.driving.frames == len(drive)
        assert abs(report.driving.kl - expected) < 1e-12

    def test_gaze_model_evaluation_runs(self, small_episode):
        frames = build_gaze_frames([small_episode])
        report = evaluate_gaze(GazeNet.create(), frames)
        assert np.isfinite(report.overall.kl) and -1 <= report.overall.cc <= 1

    def test_expert_replay_is_zero(self, small_episode):
        frames = build_agent_frames(small_episode, "raw")
        assert evaluate_agent(frames.targets, frames) == (0.0, 0.0)

    def test_constant_predictor_matches_loop_oracle(self, small_episode):
        frames = build_agent_frames(small_episode, "raw")
        const = (0.1, 0.5, 0.0, 3.0)
        mse, mae = evaluate_agent(lambda i: const, frames)
        preds = np.tile(const, (len(frames), 1))
        w = MetricConfig().task_weights
        assert abs(mse - oracle_multitask(preds, frames.targets, w, "mse")) < 1e-12
        assert abs(mae - oracle_multitask(preds, frames.targets, w, "mae")) < 1e-12

    def test_periodic_series_is_step_indexed(self, small_episode):
        frames = build_agent_frames(small_episode, "raw")
        model = DrivingAgent.create(AgentConfig())
        losses, series = train_agent(model, frames, steps=9, batch_size=8, eval_every=3, eval_fn=agent_eval_fn(frames))
        assert len(losses) == 9
        assert [s[0] for s in series] == [3, 6, 9]
        assert all(len(s) == 3 and s[1] >= 0 and s[2] >= 0 for s in series)

    def test_empty_frames(self):
        empty = AgentFrames((np.zeros((0, 64, 64, 3), np.float32),), np.zeros(0), np.zeros(0, np.int64), np.zeros((0, 4)), [])
        with pytest.raises(ValueError):
            evaluate_agent(np.zeros((0, 4)), empty)
