from src.fusion.compositor import (
    FusedFrame,
    fuse_head,
    fuse_head_backward,
    render_head,
    render_head_backward,
    render_sequence,
)
from src.fusion.model import BranchModel, TalkingHeadModel
