//! The local attribute cache.
//!
//! Tokens are softly matched against the `M` cache entries by cosine
//! similarity, hard-assigned to their most probable entry, and folded into
//! that entry with a momentum update. Class embeddings read the cache back
//! through a similarity-weighted average of the entries.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CheckpointError, Error, Result};
use crate::numkit::{ops, DiffValue, Matrix, Tape};

/// Soft and hard assignment of `N` tokens to `M` entries.
#[derive(Clone, Debug)]
pub struct Assignment {
    /// `N×M`; row `i` is the softmax over entries of `cos(v_i, A_j)`.
    pub probabilities: Matrix,
    /// `groups[j]` holds the token indices whose most probable entry is `j`,
    /// in increasing order.
    pub groups: Vec<Vec<usize>>,
}

impl Assignment {
    /// Entry chosen for each token.
    pub fn owner_of(&self) -> Vec<usize> {
        let mut owner = vec![0; self.probabilities.rows()];
        for (j, g) in self.groups.iter().enumerate() {
            for &i in g {
                owner[i] = j;
            }
        }
        owner
    }
}

/// Result of reading the cache for a set of class embeddings.
#[derive(Clone, Debug)]
pub struct Retrieval {
    /// `C×M` retrieval weights.
    pub weights: Matrix,
    /// `C×d` retrieved context, `weights · A`.
    pub context: Matrix,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CacheSnapshot {
    pub entries: Matrix,
    pub gamma: f64,
    pub write_count: Vec<u64>,
    pub frozen: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocalCache {
    entries: Matrix,
    gamma: f64,
    write_count: Vec<u64>,
    frozen: bool,
}

impl LocalCache {
    /// `m` seeded random unit vectors of dimension `d`.
    pub fn init(m: usize, d: usize, gamma: f64, seed: u64) -> Result<Self> {
        if m == 0 || d == 0 {
            return Err(Error::Config(format!(
                "cache needs at least one entry and one dimension (M={m}, d={d})"
            )));
        }
        check_gamma(gamma)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw = Matrix::randn(m, d, 1.0, &mut rng);
        let entries = ops::row_l2_normalize(&raw).matrix;
        Ok(Self {
            entries,
            gamma,
            write_count: vec![0; m],
            frozen: false,
        })
    }

    /// Wraps existing entries, e.g. when restoring from disk.
    pub fn from_entries(entries: Matrix, gamma: f64) -> Result<Self> {
        if entries.rows() == 0 || entries.cols() == 0 {
            return Err(Error::Config("cache entries must be non-empty".into()));
        }
        check_gamma(gamma)?;
        let m = entries.rows();
        Ok(Self {
            entries,
            gamma,
            write_count: vec![0; m],
            frozen: false,
        })
    }

    pub fn entries(&self) -> &Matrix {
        &self.entries
    }

    pub fn num_entries(&self) -> usize {
        self.entries.rows()
    }

    pub fn dim(&self) -> usize {
        self.entries.cols()
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn write_count(&self) -> &[u64] {
        &self.write_count
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn unfreeze(&mut self) {
        self.frozen = false;
    }

    pub fn assign(&self, tokens: &Matrix) -> Result<Assignment> {
        if tokens.rows() == 0 {
            return Err(Error::Dimension("assign: no tokens".into()));
        }
        if tokens.cols() != self.dim() {
            return Err(Error::Dimension(format!(
                "assign: token dim {} but cache dim {}",
                tokens.cols(),
                self.dim()
            )));
        }
        let sims = ops::cosine_sim(tokens, &self.entries)?.matrix;
        let probabilities = ops::row_softmax(&sims);
        let mut groups = vec![Vec::new(); self.num_entries()];
        for i in 0..probabilities.rows() {
            groups[ops::argmax(probabilities.row(i))].push(i);
        }
        Ok(Assignment {
            probabilities,
            groups,
        })
    }

    /// Momentum update of every entry from its assigned tokens. Entries with
    /// no tokens still decay by `γ`.
    pub fn write(&mut self, tokens: &Matrix, assignment: &Assignment) -> Result<()> {
        if self.frozen {
            return Err(Error::FrozenWrite);
        }
        let (n, m, d) = (tokens.rows(), self.num_entries(), self.dim());
        if tokens.cols() != d
            || assignment.probabilities.shape() != (n, m)
            || assignment.groups.len() != m
        {
            return Err(Error::Dimension(format!(
                "write: tokens {}x{}, assignment {}x{} with {} groups, cache {m}x{d}",
                n,
                tokens.cols(),
                assignment.probabilities.rows(),
                assignment.probabilities.cols(),
                assignment.groups.len()
            )));
        }
        let keep = self.gamma;
        let take = 1.0 - self.gamma;
        let mut gathered = vec![0.0; d];
        for (j, group) in assignment.groups.iter().enumerate() {
            gathered.fill(0.0);
            for &i in group {
                let w = assignment.probabilities.get(i, j);
                for (g, &v) in gathered.iter_mut().zip(tokens.row(i)) {
                    *g += w * v;
                }
            }
            if take != 0.0 {
                for (a, &g) in self.entries.row_mut(j).iter_mut().zip(&gathered) {
                    *a = keep * *a + take * g;
                }
            }
            if !group.is_empty() {
                self.write_count[j] += 1;
            }
        }
        Ok(())
    }

    /// Assigns and writes in one call; returns the assignment used.
    pub fn observe(&mut self, tokens: &Matrix) -> Result<Assignment> {
        if self.frozen {
            return Err(Error::FrozenWrite);
        }
        let a = self.assign(tokens)?;
        self.write(tokens, &a)?;
        Ok(a)
    }

    pub fn retrieve(&self, class_embeddings: &Matrix) -> Result<Retrieval> {
        if class_embeddings.cols() != self.dim() {
            return Err(Error::Dimension(format!(
                "retrieve: embedding dim {} but cache dim {}",
                class_embeddings.cols(),
                self.dim()
            )));
        }
        let sims = ops::cosine_sim(class_embeddings, &self.entries)?.matrix;
        let weights = ops::row_softmax(&sims);
        let context = ops::mat_mul(&weights, &self.entries)?;
        Ok(Retrieval { weights, context })
    }

    /// Tape form of [`retrieve`](Self::retrieve). The entries enter as a
    /// constant; gradients flow only into `class_embeddings`.
    pub fn retrieve_on_tape(
        &self,
        tape: &mut Tape,
        class_embeddings: DiffValue,
    ) -> Result<(DiffValue, DiffValue)> {
        let a = tape.constant(self.entries.clone());
        let sims = tape.cosine_sim(class_embeddings, a)?;
        let w = tape.row_softmax(sims);
        let ctx = tape.mat_mul(w, a)?;
        Ok((w, ctx))
    }

    pub fn snapshot(&self) -> CacheSnapshot {
        CacheSnapshot {
            entries: self.entries.clone(),
            gamma: self.gamma,
            write_count: self.write_count.clone(),
            frozen: self.frozen,
        }
    }

    pub fn restore(&mut self, snap: &CacheSnapshot) -> Result<()> {
        if snap.entries.shape() != self.entries.shape() || snap.write_count.len() != self.num_entries() {
            return Err(CheckpointError::Shape {
                name: "cache entries".into(),
                expected: format!("{}x{}", self.entries.rows(), self.entries.cols()),
                actual: format!("{}x{}", snap.entries.rows(), snap.entries.cols()),
            }
            .into());
        }
        check_gamma(snap.gamma)?;
        self.entries = snap.entries.clone();
        self.gamma = snap.gamma;
        self.write_count = snap.write_count.clone();
        self.frozen = snap.frozen;
        Ok(())
    }

    pub fn from_snapshot(snap: CacheSnapshot) -> Result<Self> {
        let mut c = Self::from_entries(snap.entries.clone(), snap.gamma)?;
        if snap.write_count.len() != c.num_entries() {
            return Err(CheckpointError::Shape {
                name: "cache write_count".into(),
                expected: c.num_entries().to_string(),
                actual: snap.write_count.len().to_string(),
            }
            .into());
        }
        c.write_count = snap.write_count;
        c.frozen = snap.frozen;
        Ok(c)
    }
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::Config(format!("momentum γ={gamma} outside [0,1]")));
    }
    Ok(())
}
