//! Image-to-latent codecs. Score distillation runs in the codec's latent
//! space; the codec also exposes the adjoint of its encoder so latent
//! gradients can be pulled back onto rendered pixels.

use crate::image::ImageBuf;

use super::{GuidanceError, Latent};

/// Maps rendered images into the latent space scores are predicted in,
/// and back. `encode_adjoint` must be the exact transpose of `encode` as
/// a linear map so gradient pullback is faithful.
pub trait LatentCodec: Send + Sync {
    /// Edge length of the pixel block that maps to one latent site.
    fn spatial_stride(&self) -> usize;

    /// Upper bound on the per-pixel round-trip error `decode(encode(x)) - x`
    /// for images in `[0, 1]`.
    fn round_trip_tolerance(&self) -> f32;

    fn encode(&self, image: &ImageBuf) -> Result<Latent, GuidanceError>;

    fn decode(&self, latent: &Latent) -> Result<ImageBuf, GuidanceError>;

    /// Transpose of `encode`: pulls a latent cotangent back to an image
    /// cotangent of the given pixel shape. The result carries gradients
    /// and may lie outside `[0, 1]`.
    fn encode_adjoint(
        &self,
        cotangent: &Latent,
        height: u32,
        width: u32,
    ) -> Result<ImageBuf, GuidanceError>;
}

fn check_image_shape(
    image: &ImageBuf,
    stride: usize,
) -> Result<(usize, usize), GuidanceError> {
    let (h, w) = (image.height as usize, image.width as usize);
    if h % stride != 0 || w % stride != 0 {
        return Err(GuidanceError::Contract(format!(
            "image {h}x{w} is not divisible by the codec stride {stride}"
        )));
    }
    Ok((h, w))
}

/// Pass-through codec: the latent space is pixel space.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityCodec;

impl LatentCodec for IdentityCodec {
    fn spatial_stride(&self) -> usize {
        1
    }

    fn round_trip_tolerance(&self) -> f32 {
        0.0
    }

    fn encode(&self, image: &ImageBuf) -> Result<Latent, GuidanceError> {
        Latent::new(
            image.height as usize,
            image.width as usize,
            3,
            image.data.clone(),
        )
    }

    fn decode(&self, latent: &Latent) -> Result<ImageBuf, GuidanceError> {
        if latent.channels != 3 {
            return Err(GuidanceError::Contract(format!(
                "identity codec decodes 3-channel latents, got {}",
                latent.channels
            )));
        }
        ImageBuf::new(
            latent.height as u32,
            latent.width as u32,
            latent.data.clone(),
        )
        .map_err(GuidanceError::from)
    }

    fn encode_adjoint(
        &self,
        cotangent: &Latent,
        height: u32,
        width: u32,
    ) -> Result<ImageBuf, GuidanceError> {
        if cotangent.shape() != (height as usize, width as usize, 3) {
            return Err(GuidanceError::Contract(format!(
                "cotangent shape {:?} does not match image {height}x{width}x3",
                cotangent.shape()
            )));
        }
        ImageBuf::new(height, width, cotangent.data.clone()).map_err(GuidanceError::from)
    }
}

/// Block-averaging codec: each `stride x stride` pixel block becomes one
/// latent site per channel. Decoding replicates each site back over its
/// block, so round-trip error is bounded by the within-block spread.
#[derive(Debug, Clone, Copy)]
pub struct PooledCodec {
    stride: usize,
}

impl PooledCodec {
    pub fn new(stride: usize) -> Result<PooledCodec, GuidanceError> {
        if stride == 0 {
            return Err(GuidanceError::Contract("codec stride must be positive".into()));
        }
        Ok(PooledCodec { stride })
    }
}

impl Default for PooledCodec {
    fn default() -> Self {
        PooledCodec { stride: 8 }
    }
}

impl LatentCodec for PooledCodec {
    fn spatial_stride(&self) -> usize {
        self.stride
    }

    fn round_trip_tolerance(&self) -> f32 {
        // A block mean differs from any member of the block by at most
        // the full value range.
        1.0
    }

    fn encode(&self, image: &ImageBuf) -> Result<Latent, GuidanceError> {
        let s = self.stride;
        let (h, w) = check_image_shape(image, s)?;
        let (lh, lw) = (h / s, w / s);
        let mut data = vec![0.0f32; lh * lw * 3];
        let inv_area = 1.0 / (s * s) as f64;
        for br in 0..lh {
            for bc in 0..lw {
                let mut acc = [0.0f64; 3];
                for dr in 0..s {
                    for dc in 0..s {
                        let px = image.pixel((br * s + dr) as u32, (bc * s + dc) as u32);
                        for ch in 0..3 {
                            acc[ch] += px[ch] as f64;
                        }
                    }
                }
                let base = (br * lw + bc) * 3;
                for ch in 0..3 {
                    data[base + ch] = (acc[ch] * inv_area) as f32;
                }
            }
        }
        Latent::new(lh, lw, 3, data)
    }

    fn decode(&self, latent: &Latent) -> Result<ImageBuf, GuidanceError> {
        if latent.channels != 3 {
            return Err(GuidanceError::Contract(format!(
                "pooled codec decodes 3-channel latents, got {}",
                latent.channels
            )));
        }
        let s = self.stride;
        let (h, w) = (latent.height * s, latent.width * s);
        let mut img = ImageBuf::filled(h as u32, w as u32, [0.0; 3]);
        for br in 0..latent.height {
            for bc in 0..latent.width {
                let base = (br * latent.width + bc) * 3;
                let px = [
                    latent.data[base],
                    latent.data[base + 1],
                    latent.data[base + 2],
                ];
                for dr in 0..s {
                    for dc in 0..s {
                        img.set_pixel((br * s + dr) as u32, (bc * s + dc) as u32, px);
                    }
                }
            }
        }
        Ok(img)
    }

    fn encode_adjoint(
        &self,
        cotangent: &Latent,
        height: u32,
        width: u32,
    ) -> Result<ImageBuf, GuidanceError> {
        let s = self.stride;
        let (h, w) = (height as usize, width as usize);
        if h % s != 0 || w % s != 0 {
            return Err(GuidanceError::Contract(format!(
                "image {h}x{w} is not divisible by the codec stride {s}"
            )));
        }
        if cotangent.shape() != (h / s, w / s, 3) {
            return Err(GuidanceError::Contract(format!(
                "cotangent shape {:?} does not match pooled {}x{}x3",
                cotangent.shape(),
                h / s,
                w / s
            )));
        }
        // encode averages s*s pixels with weight 1/s^2, so the transpose
        // spreads each latent cotangent uniformly with the same weight.
        let weight = 1.0 / (s * s) as f32;
        let mut img = ImageBuf::filled(height, width, [0.0; 3]);
        for br in 0..cotangent.height {
            for bc in 0..cotangent.width {
                let base = (br * cotangent.width + bc) * 3;
                let px = [
                    cotangent.data[base] * weight,
                    cotangent.data[base + 1] * weight,
                    cotangent.data[base + 2] * weight,
                ];
                for dr in 0..s {
                    for dc in 0..s {
                        img.set_pixel((br * s + dr) as u32, (bc * s + dc) as u32, px);
                    }
                }
            }
        }
        Ok(img)
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn random_image(height: u32, width: u32, seed: u64) -> ImageBuf {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..(height * width * 3) as usize)
            .map(|_| rng.gen::<f32>())
            .collect();
        ImageBuf::new(height, width, data).unwrap()
    }

    #[test]
    fn identity_codec_round_trips_bit_exactly() {
        let codec = IdentityCodec;
        let img = random_image(6, 9, 11);
        let latent = codec.encode(&img).unwrap();
        assert_eq!(latent.shape(), (6, 9, 3));
        let back = codec.decode(&latent).unwrap();
        assert_eq!(back.data, img.data);
    }

    #[test]
    fn pooled_encode_matches_block_means() {
        let codec = PooledCodec::new(4).unwrap();
        let img = random_image(8, 12, 21);
        let latent = codec.encode(&img).unwrap();
        assert_eq!(latent.shape(), (2, 3, 3));
        // Independent oracle: accumulate each block in f64 by direct
        // iteration over the raw buffer.
        for br in 0..2usize {
            for bc in 0..3usize {
                for ch in 0..3usize {
                    let mut acc = 0.0f64;
                    for dr in 0..4u32 {
                        for dc in 0..4u32 {
                            acc += img.pixel(br as u32 * 4 + dr, bc as u32 * 4 + dc)[ch]
                                as f64;
                        }
                    }
                    let want = (acc / 16.0) as f32;
                    let got = latent.data[(br * 3 + bc) * 3 + ch];
                    assert!(
                        (got - want).abs() < 1e-6,
                        "block ({br},{bc}) channel {ch}: {got} vs {want}"
                    );
                }
            }
        }
    }

    #[test]
    fn pooled_decode_replicates_blocks_and_round_trips_in_latent_space() {
        let codec = PooledCodec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let latent = Latent::standard_normal(2, 3, 3, &mut rng);
        let img = codec.decode(&latent).unwrap();
        assert_eq!(img.height, 16);
        assert_eq!(img.width, 24);
        // Every pixel of a block equals the block's latent value.
        for br in 0..2usize {
            for bc in 0..3usize {
                let base = (br * 3 + bc) * 3;
                for dr in 0..8u32 {
                    for dc in 0..8u32 {
                        let px = img.pixel(br as u32 * 8 + dr, bc as u32 * 8 + dc);
                        for ch in 0..3 {
                            assert_eq!(px[ch], latent.data[base + ch]);
                        }
                    }
                }
            }
        }
        // decode ; encode is exactly the identity on latents (the mean of
        // a constant block is the constant).
        let back = codec.encode(&img).unwrap();
        for (got, want) in back.data.iter().zip(&latent.data) {
            assert!((got - want).abs() < 1e-6);
        }
    }

    #[test]
    fn pooled_codec_rejects_indivisible_shapes() {
        let codec = PooledCodec::default();
        let img = random_image(12, 16, 41);
        assert!(codec.encode(&img).is_err());
        let cot = Latent::zeros(1, 2, 3);
        assert!(codec.encode_adjoint(&cot, 12, 16).is_err());
        // Divisible shape but mismatched latent grid.
        assert!(codec.encode_adjoint(&cot, 16, 32).is_err());
    }

    #[test]
    fn pooled_adjoint_is_the_transpose_of_encode() {
        // <encode(x), y> == <x, encode_adjoint(y)> for random x, y.
        let codec = PooledCodec::new(4).unwrap();
        let img = random_image(8, 12, 51);
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        let y = Latent::standard_normal(2, 3, 3, &mut rng);
        let enc = codec.encode(&img).unwrap();
        let lhs: f64 = enc
            .data
            .iter()
            .zip(&y.data)
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum();
        let pulled = codec.encode_adjoint(&y, 8, 12).unwrap();
        let rhs: f64 = img
            .data
            .iter()
            .zip(&pulled.data)
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum();
        assert!(
            (lhs - rhs).abs() <= 1e-4 * lhs.abs().max(rhs.abs()).max(1.0),
            "{lhs} vs {rhs}"
        );
    }

    #[test]
    fn round_trip_error_stays_within_the_declared_tolerance() {
        let codecs: Vec<Box<dyn LatentCodec>> =
            vec![Box::new(IdentityCodec), Box::new(PooledCodec::default())];
        for codec in &codecs {
            let img = random_image(16, 16, 61);
            let back = codec.decode(&codec.encode(&img).unwrap()).unwrap();
            let tol = codec.round_trip_tolerance();
            for (a, b) in img.data.iter().zip(&back.data) {
                assert!(
                    (a - b).abs() <= tol,
                    "round-trip error {} exceeds declared tolerance {tol}",
                    (a - b).abs()
                );
            }
        }
    }
}
