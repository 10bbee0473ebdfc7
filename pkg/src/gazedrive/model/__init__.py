from ..commands import HighLevelCommand
from .checkpoint import load_model, load_tensors, save_model, save_tensors
from .data import AgentFrames, GazeFrames, build_agent_frames, build_gaze_frames, predict_episode_maps
from .evaluate import GazeReport, evaluate_agent, evaluate_gaze
from .gradcheck import grad_check
from .nets import VARIANTS, AgentConfig, DrivingAgent, GazeNet, GazeNetConfig
from .train import agent_loss, agent_train_step, gaze_loss, gaze_train_step, train_agent, train_gaze


def gaze_forward(clip, command, model: GazeNet):
    """Single clip (N, C, H, W) -> AttentionMap from the command's branch."""
    import torch

    from ..attention import AttentionMap

    from .nets import model_dtype

    clip = torch.as_tensor(clip, dtype=model_dtype(model))
    with torch.no_grad():
        probs = model(clip[None], [command])[0].double().numpy()
    return AttentionMap(probs / probs.sum())


def agent_forward(inputs, speed: float, command, model: DrivingAgent):
    """Images as (H, W, C) arrays -> ``(ControlSignal, predicted_speed)``."""
    import torch

    from ..metrics import ControlSignal
    from .data import to_chw
    from .nets import model_dtype

    if speed < 0:
        raise ValueError("speed must be non-negative")
    dtype = model_dtype(model)
    images = tuple(to_chw(x, dtype)[None] for x in inputs)
    with torch.no_grad():
        out = model(images, torch.tensor([float(speed)], dtype=dtype), [int(command)])[0].tolist()
    return ControlSignal(out[0], out[1], out[2], out[3]), out[3]
