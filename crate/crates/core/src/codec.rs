//! Compression and decompression against a stored model.

use crate::das::{das_forward, DelayTable};
use crate::error::{ensure_shape, Error, Result};
use crate::io::CompressedStream;
use crate::model::Model;
use crate::tensor::Tensor;

/// Encodes and quantizes raw data, tagging the stream with the model's
/// fingerprint.
pub fn compress(model: &Model, fingerprint: [u8; 32], f: &Tensor) -> Result<CompressedStream> {
    CompressedStream::new(model.compress(f)?, model.codebook.size(), fingerprint)
}

fn check_stream(model: &Model, fingerprint: [u8; 32], stream: &CompressedStream) -> Result<()> {
    if stream.fingerprint != fingerprint {
        return Err(Error::FingerprintMismatch);
    }
    if stream.codebook_size != model.codebook.size() {
        return Err(Error::Malformed(format!(
            "stream codebook size {} differs from the model's {}",
            stream.codebook_size,
            model.codebook.size()
        )));
    }
    ensure_shape(&model.code_shape(), &stream.code_shape())
}

/// Decoded raw data, refusing streams made by a different model.
pub fn decompress_data(model: &Model, fingerprint: [u8; 32], stream: &CompressedStream) -> Result<Tensor> {
    check_stream(model, fingerprint, stream)?;
    model.decompress_data(&stream.indices)
}

/// DAS image of the decoded data.
pub fn decompress_image(
    model: &Model,
    fingerprint: [u8; 32],
    stream: &CompressedStream,
    table: &DelayTable,
) -> Result<Tensor> {
    das_forward(&decompress_data(model, fingerprint, stream)?, table)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::das::DelayTable;
    use crate::model::{LayerSpec, ModelConfig};
    use crate::store::{fingerprint, model_from_bytes, model_to_bytes};

    fn setup() -> (Model, [u8; 32], Tensor, DelayTable) {
        let cfg = ModelConfig {
            data_shape: [8, 3, 3],
            encoder: vec![LayerSpec {
                filters: 2,
                stride: [2, 1, 1],
                weight_standardization: true,
            }],
            kernel: [3, 3, 3],
            codebook_size: 4,
            groupnorm_groups: 1,
            residual: true,
        };
        let bytes = model_to_bytes(&Model::init(cfg, 5).unwrap()).unwrap();
        let model = model_from_bytes(&bytes).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = Tensor::uniform(&[8, 3, 3], -1.0, 1.0, &mut rng);
        let d: Vec<f64> = (0..2 * 2 * 9).map(|i| (i % 9) as f64 * 0.7).collect();
        let table = DelayTable::from_indices([2, 2], [8, 3, 3], d).unwrap();
        (model, fingerprint(&bytes), f, table)
    }

    #[test]
    fn decompressed_image_equals_in_process_forward() {
        let (model, fp, f, table) = setup();
        let stream = compress(&model, fp, &f).unwrap();
        let wire = CompressedStream::from_bytes(&stream.to_bytes().unwrap()).unwrap();
        let image = decompress_image(&model, fp, &wire, &table).unwrap();
        let direct = model.forward_data_to_image(&f, &table).unwrap();
        assert_eq!(image, direct.u_hat.unwrap());
    }

    #[test]
    fn foreign_fingerprint_is_refused() {
        let (model, fp, f, table) = setup();
        let mut stream = compress(&model, fp, &f).unwrap();
        stream.fingerprint[31] ^= 1;
        assert!(matches!(
            decompress_image(&model, fp, &stream, &table),
            Err(Error::FingerprintMismatch)
        ));
    }
}
