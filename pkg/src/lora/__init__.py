"""LoRA adapters over a frozen base model."""
