use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Quadruple, TkgDataset};
use crate::error::{Result, TkgError};

/// Periodic synthetic TKG: `period` fixed fact sets, the one for phase
/// `t mod period` is replayed at every timestamp `t`. Each phase gives every
/// entity exactly one outgoing fact with a random relation and a random
/// object other than itself. Split 80/10/10 by timestamp.
pub fn gen_synthetic_tkg(
    num_entities: usize,
    num_relations: usize,
    period: usize,
    num_times: usize,
    seed: u64,
) -> Result<TkgDataset> {
    if period == 0 {
        return Err(TkgError::contract("period must be at least 1"));
    }
    if num_times < 3 * period {
        return Err(TkgError::contract(format!(
            "need at least 3·period = {} timestamps, got {num_times}",
            3 * period
        )));
    }
    if num_entities == 0 || num_relations == 0 {
        return Err(TkgError::contract("need at least one entity and one relation"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phases: Vec<Vec<(usize, usize, usize)>> = (0..period)
        .map(|_| {
            (0..num_entities)
                .map(|s| {
                    let r = rng.gen_range(0..num_relations);
                    let o = if num_entities == 1 {
                        0
                    } else {
                        let o = rng.gen_range(0..num_entities - 1);
                        if o >= s {
                            o + 1
                        } else {
                            o
                        }
                    };
                    (s, r, o)
                })
                .collect()
        })
        .collect();
    let quads: Vec<Quadruple> = (0..num_times)
        .flat_map(|t| {
            phases[t % period].iter().map(move |&(s, r, o)| Quadruple {
                subject: s,
                relation: r,
                object: o,
                time: t,
            })
        })
        .collect();
    let train_end = num_times * 8 / 10;
    let valid_end = num_times * 9 / 10;
    TkgDataset::from_quadruples(&quads, num_entities, num_relations, num_times, (train_end, valid_end))
}
