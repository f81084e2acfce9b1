"""AU+POSE to face images: conditioning images, a schematic renderer, and a temporal GAN."""
