"""distillkit: teacher-student distillation with ghost-stage backbones."""

__version__ = "0.1.0"
