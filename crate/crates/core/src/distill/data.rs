use rand::Rng;

use crate::autoencoder::{stack_images, AutoencoderPair, Which};
use crate::denoiser::Conditioning;
use crate::error::{Error, Result};
use crate::synthdata::{encode_instructions, triplet_at, EditTriplet, Split};
use crate::tensor::Tensor;

const ENCODE_CHUNK: usize = 32;

/// Edit triplets in latent space: source latents, edited latents and
/// instruction ids.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentDataset {
    pub sources: Tensor,
    pub targets: Tensor,
    pub instructions: Vec<usize>,
}

impl LatentDataset {
    pub fn new(sources: Tensor, targets: Tensor, instructions: Vec<usize>) -> Result<Self> {
        crate::error::ensure_shape(sources.shape(), targets.shape())?;
        if sources.dims4()?.0 != instructions.len() || instructions.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "{} latents for {} instructions",
                sources.batch(),
                instructions.len()
            )));
        }
        encode_instructions(&instructions)?;
        Ok(Self {
            sources,
            targets,
            instructions,
        })
    }

    pub fn from_triplets(pair: &AutoencoderPair, triplets: &[EditTriplet], which: Which) -> Result<Self> {
        let mut src = Vec::new();
        let mut dst = Vec::new();
        for chunk in triplets.chunks(ENCODE_CHUNK) {
            let s: Vec<Tensor> = chunk.iter().map(|t| t.source.clone()).collect();
            let d: Vec<Tensor> = chunk.iter().map(|t| t.edited.clone()).collect();
            src.push(pair.encode(&stack_images(&s)?, which)?);
            dst.push(pair.encode(&stack_images(&d)?, which)?);
        }
        let cat = |v: &[Tensor]| Tensor::concat_batch(&v.iter().collect::<Vec<_>>());
        Self::new(cat(&src)?, cat(&dst)?, triplets.iter().map(|t| t.instruction_id).collect())
    }

    /// Generate `n` triplets of `split` and encode them.
    pub fn synthetic(pair: &AutoencoderPair, n: usize, base_seed: u64, split: Split) -> Result<Self> {
        let triplets = (0..n as u64)
            .map(|i| triplet_at(base_seed, i, split))
            .collect::<Result<Vec<_>>>()?;
        Self::from_triplets(pair, &triplets, Which::Big)
    }

    pub fn len(&self) -> usize {
        self.instructions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instructions.is_empty()
    }

    /// `(edited latents, conditioning)` for items `idx`.
    pub fn batch(&self, idx: &[usize]) -> Result<(Tensor, Conditioning)> {
        let ids: Vec<usize> = idx.iter().map(|&i| self.instructions[i]).collect();
        let cond = Conditioning::new(Some(self.sources.gather_batch(idx)?), Some(encode_instructions(&ids)?));
        Ok((self.targets.gather_batch(idx)?, cond))
    }

    /// Uniformly drawn items, with replacement.
    pub fn sample<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Result<(Tensor, Conditioning)> {
        let idx: Vec<usize> = (0..batch).map(|_| rng.random_range(0..self.len())).collect();
        self.batch(&idx)
    }

    /// Latent `(C, H, W)` of one item.
    pub fn latent_dims(&self) -> (usize, usize, usize) {
        let s = self.sources.shape();
        (s[1], s[2], s[3])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn encodes_and_batches() {
        let pair = AutoencoderPair::new(&mut ChaCha8Rng::seed_from_u64(0));
        let d = LatentDataset::synthetic(&pair, 5, 3, Split::Train).unwrap();
        assert_eq!(d.sources.shape(), &[5, 4, 8, 8]);
        let t = triplet_at(3, 2, Split::Train).unwrap();
        let z = pair.encode(&stack_images(&[t.edited]).unwrap(), Which::Big).unwrap();
        assert!(d.targets.batch_item(2).unwrap().sub(&z).unwrap().max_abs() < 1e-12);
        let (x, c) = d.batch(&[2, 0]).unwrap();
        assert_eq!(x.shape(), &[2, 4, 8, 8]);
        assert_eq!(c.text.unwrap().shape(), &[2, 4, 32]);
        assert_eq!(c.image.unwrap().batch_item(1).unwrap(), d.sources.batch_item(0).unwrap());
    }
}
