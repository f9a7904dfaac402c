"""Navigation world model: CDiT world model, diffusion, planning and evaluation."""
