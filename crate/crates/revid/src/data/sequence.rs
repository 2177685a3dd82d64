//! Sequence assembly: turning per-identity image pools into fixed-length
//! instance sequences for the recurrent stage.

use super::augment::{augment, ALL_OPS};
use super::{AugmentParams, DataError, VehicleImage};
use rand::seq::SliceRandom;
use rand::Rng;

/// Builds a training sequence of `t` augmented instances drawn from one
/// identity's records. When the pool holds at least `t` records they are
/// sampled without replacement; smaller pools are sampled with replacement.
/// Instance order is randomized, and every instance passes through the full
/// augmentation chain.
pub fn build_train_sequence(
    records: &[VehicleImage],
    t: usize,
    params: &AugmentParams,
    rng: &mut impl Rng,
) -> Result<Vec<VehicleImage>, DataError> {
    if t == 0 {
        return Err(DataError::ZeroSequenceLength);
    }
    let first = records.first().ok_or(DataError::EmptyRecords)?;
    if let Some(other) = records.iter().find(|r| r.id() != first.id()) {
        return Err(DataError::MixedIdentities {
            first: first.id().to_owned(),
            second: other.id().to_owned(),
        });
    }

    let mut picks: Vec<&VehicleImage> = if records.len() >= t {
        let mut indices: Vec<usize> = (0..records.len()).collect();
        indices.shuffle(rng);
        indices[..t].iter().map(|&i| &records[i]).collect()
    } else {
        (0..t)
            .map(|_| &records[rng.gen_range(0..records.len())])
            .collect()
    };
    picks.shuffle(rng);

    Ok(picks
        .into_iter()
        .map(|img| augment(img, &ALL_OPS, params, rng))
        .collect())
}

/// Builds a query-time sequence: the original image first, followed by
/// `t - 1` augmented copies of it.
pub fn build_query_sequence(
    image: &VehicleImage,
    t: usize,
    params: &AugmentParams,
    rng: &mut impl Rng,
) -> Result<Vec<VehicleImage>, DataError> {
    if t == 0 {
        return Err(DataError::ZeroSequenceLength);
    }
    let mut seq = Vec::with_capacity(t);
    seq.push(image.clone());
    for _ in 1..t {
        seq.push(augment(image, &ALL_OPS, params, rng));
    }
    Ok(seq)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn image(id: &str, fill: f64) -> VehicleImage {
        VehicleImage::new(id, None, 8, 8, 1, vec![fill; 64]).unwrap()
    }

    /// Identity augmentation parameters let tests trace which source record
    /// each sequence slot came from.
    fn identity_params() -> AugmentParams {
        AugmentParams::new((1.0, 1.0), 0.0, (1.0, 1.0)).unwrap()
    }

    #[test]
    fn large_pools_are_sampled_without_replacement() {
        let pool: Vec<_> = (0..5).map(|i| image("v", i as f64 / 10.0)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let seq = build_train_sequence(&pool, 3, &identity_params(), &mut rng).unwrap();
        assert_eq!(seq.len(), 3);
        let mut fills: Vec<f64> = seq.iter().map(|img| img.pixels()[0]).collect();
        fills.sort_by(f64::total_cmp);
        fills.dedup();
        assert_eq!(fills.len(), 3, "three distinct source records expected");
    }

    #[test]
    fn small_pools_reuse_records() {
        let pool = vec![image("v", 0.2), image("v", 0.4)];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let seq = build_train_sequence(&pool, 3, &identity_params(), &mut rng).unwrap();
        assert_eq!(seq.len(), 3);
        for img in &seq {
            let f = img.pixels()[0];
            assert!(f == 0.2 || f == 0.4);
        }
    }

    #[test]
    fn mixed_identities_are_rejected() {
        let pool = vec![image("v1", 0.2), image("v2", 0.4)];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let err = build_train_sequence(&pool, 2, &identity_params(), &mut rng).unwrap_err();
        assert!(matches!(err, DataError::MixedIdentities { .. }));
    }

    #[test]
    fn empty_pool_and_zero_length_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!(matches!(
            build_train_sequence(&[], 3, &identity_params(), &mut rng),
            Err(DataError::EmptyRecords)
        ));
        let pool = vec![image("v", 0.2)];
        assert!(matches!(
            build_train_sequence(&pool, 0, &identity_params(), &mut rng),
            Err(DataError::ZeroSequenceLength)
        ));
    }

    #[test]
    fn training_instances_are_augmented() {
        let pool: Vec<_> = (0..3).map(|_| image("v", 0.5)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let seq = build_train_sequence(&pool, 3, &AugmentParams::default(), &mut rng).unwrap();
        // Brightness jitter alone makes an all-0.5 image differ.
        assert!(seq.iter().any(|img| img.pixels() != pool[0].pixels()));
    }

    #[test]
    fn query_sequence_keeps_the_original_first() {
        let img = image("q", 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let seq = build_query_sequence(&img, 3, &AugmentParams::default(), &mut rng).unwrap();
        assert_eq!(seq.len(), 3);
        assert_eq!(seq[0], img, "slot 0 must be the unaugmented query");
        assert!(seq[1] != img || seq[2] != img, "copies should be augmented");
        for s in &seq {
            assert_eq!(s.id(), "q");
        }
    }

    #[test]
    fn sequence_order_is_seed_deterministic() {
        let pool: Vec<_> = (0..6).map(|i| image("v", i as f64 / 10.0)).collect();
        let params = AugmentParams::default();
        let a = build_train_sequence(&pool, 3, &params, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        let b = build_train_sequence(&pool, 3, &params, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        assert_eq!(a, b);
    }
}
