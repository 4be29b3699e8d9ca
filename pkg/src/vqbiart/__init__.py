"""Vector-quantized image autoencoders and a bidirectional image/text transformer."""
