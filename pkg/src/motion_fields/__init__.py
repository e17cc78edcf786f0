from src.motion_fields.branch import (
    ConditionVector,
    FieldConfig,
    FieldGradients,
    FieldOutput,
    HybridMode,
    MotionFieldBranch,
    face_deformation,
    field_backward,
    mouth_deformation,
)
from src.motion_fields.hash_encoder import BoundingBox, EncoderConfig, TriPlaneHashEncoder, encode_position
