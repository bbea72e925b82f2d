//! Logits to structure.

use crate::fold::SecondaryStructure;
use crate::tensor::Scalar;

/// Reads pairing logits [l, l, 2] (class 0 unpaired, class 1 paired) into a
/// predicted pair set.
///
/// Logits are symmetrized per class as (M + M^T) / 2, a cell counts as
/// paired when the class-1 score reaches the class-0 score, and the diagonal
/// is forced unpaired. No matching or conflict resolution: a base may appear
/// in several predicted pairs, and the metrics operate on this raw cell set.
pub fn decode_structure<T: Scalar>(logits: &[T], l: usize) -> SecondaryStructure {
    debug_assert_eq!(logits.len(), l * l * 2);
    let mut pairs = Vec::new();
    let at = |i: usize, j: usize, c: usize| logits[(i * l + j) * 2 + c];
    let two = T::from_f64(2.0);
    for i in 0..l {
        for j in i + 1..l {
            let unpaired = (at(i, j, 0) + at(j, i, 0)) / two;
            let paired = (at(i, j, 1) + at(j, i, 1)) / two;
            if paired >= unpaired {
                pairs.push((i, j));
            }
        }
    }
    SecondaryStructure::new(l, pairs).expect("upper-triangle pairs are valid")
}
