//! Category-wise FIFO queues of negative representations.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MANIFEST: &str = "bank.manifest";

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    dim: usize,
    capacities: Vec<usize>,
    queues: Vec<VecDeque<Box<[f64]>>>,
}

impl MemoryBank {
    pub fn new(dim: usize, capacities: Vec<usize>) -> Result<Self> {
        if capacities.contains(&0) {
            return Err(Error::InvalidArgument("queue capacity must be positive".into()));
        }
        let queues = capacities.iter().map(|_| VecDeque::new()).collect();
        Ok(Self {
            dim,
            capacities,
            queues,
        })
    }

    /// One background class with its own capacity, every other class sharing `foreground`.
    pub fn with_background(
        dim: usize,
        classes: usize,
        background: usize,
        background_capacity: usize,
        foreground_capacity: usize,
    ) -> Result<Self> {
        let caps = (0..classes)
            .map(|c| {
                if c == background {
                    background_capacity
                } else {
                    foreground_capacity
                }
            })
            .collect();
        Self::new(dim, caps)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.queues.len()
    }

    pub fn capacity(&self, class: usize) -> usize {
        self.capacities[class]
    }

    pub fn len(&self, class: usize) -> usize {
        self.queues[class].len()
    }

    pub fn is_empty(&self, class: usize) -> bool {
        self.queues[class].is_empty()
    }

    pub fn iter(&self, class: usize) -> impl Iterator<Item = &[f64]> {
        self.queues[class].iter().map(|v| &v[..])
    }

    /// Appends in order, then drops the oldest entries beyond capacity.
    pub fn push<V: AsRef<[f64]>>(&mut self, class: usize, vectors: &[V]) -> Result<()> {
        if class >= self.queues.len() {
            return Err(Error::InvalidArgument(format!(
                "class {class} outside bank of {} classes",
                self.queues.len()
            )));
        }
        if let Some(v) = vectors.iter().find(|v| v.as_ref().len() != self.dim) {
            return Err(Error::Shape(format!(
                "vector of dimension {} pushed into bank of dimension {}",
                v.as_ref().len(),
                self.dim
            )));
        }
        let cap = self.capacities[class];
        let queue = &mut self.queues[class];
        // only the newest `cap` vectors of this push can survive
        let skip = vectors.len().saturating_sub(cap);
        for v in &vectors[skip..] {
            queue.push_back(v.as_ref().into());
        }
        while queue.len() > cap {
            queue.pop_front();
        }
        Ok(())
    }

    /// `n` draws: without replacement when the queue holds at least `n`
    /// vectors, with replacement otherwise. `None` if the queue is empty.
    pub fn sample<R: Rng + ?Sized>(&self, class: usize, n: usize, rng: &mut R) -> Option<Vec<&[f64]>> {
        let queue = self.queues.get(class)?;
        if queue.is_empty() {
            return None;
        }
        let len = queue.len();
        let picks: Vec<usize> = if len >= n {
            index::sample(rng, len, n).into_vec()
        } else {
            (0..n).map(|_| rng.gen_range(0..len)).collect()
        };
        Some(picks.into_iter().map(|i| &queue[i][..]).collect())
    }

    /// Writes one `[len, D]` f64 tensor per class plus a text manifest.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = format!("dim {}\nclasses {}\n", self.dim, self.classes());
        for (c, queue) in self.queues.iter().enumerate() {
            let data: Vec<f64> = queue.iter().flat_map(|v| v.iter().copied()).collect();
            let file = format!("bank_class{c}.u2tn");
            Tensor::from_f64(vec![queue.len(), self.dim], data)?.write(dir.join(&file))?;
            writeln!(manifest, "class {c} capacity {} file {file}", self.capacities[c]).unwrap();
        }
        let path = dir.join(MANIFEST);
        fs::write(&path, manifest).map_err(|e| Error::io(path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let bad = |line: &str| Error::Format(format!("bad bank manifest line {line:?}"));
        let mut dim = None;
        let mut entries = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split_whitespace().collect();
            match f.as_slice() {
                ["dim", d] => dim = Some(d.parse::<usize>().map_err(|_| bad(line))?),
                ["classes", _] => {}
                ["class", c, "capacity", cap, "file", file] => {
                    let c: usize = c.parse().map_err(|_| bad(line))?;
                    if c != entries.len() {
                        return Err(bad(line));
                    }
                    entries.push((cap.parse::<usize>().map_err(|_| bad(line))?, file.to_string()));
                }
                _ => return Err(bad(line)),
            }
        }
        let dim = dim.ok_or_else(|| Error::Format("bank manifest missing dim".into()))?;
        let mut bank = Self::new(dim, entries.iter().map(|(cap, _)| *cap).collect())?;
        for (c, (_, file)) in entries.iter().enumerate() {
            let t = Tensor::read(dir.join(file))?;
            if t.ndim() != 2 || t.shape()[1] != dim {
                return Err(Error::Format(format!("{file}: shape {:?}", t.shape())));
            }
            let data = t
                .to_f64_vec()
                .ok_or_else(|| Error::Format(format!("{file}: not floating")))?;
            let vectors: Vec<&[f64]> = data.chunks_exact(dim).collect();
            if vectors.len() > bank.capacities[c] {
                return Err(Error::Format(format!("{file}: more entries than capacity")));
            }
            bank.push(c, &vectors)?;
        }
        Ok(bank)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    fn v(x: f64) -> Vec<f64> {
        vec![x, -x]
    }

    fn contents(bank: &MemoryBank, c: usize) -> Vec<f64> {
        bank.iter(c).map(|v| v[0]).collect()
    }

    #[test]
    fn fifo_eviction() {
        let mut bank = MemoryBank::new(2, vec![3]).unwrap();
        bank.push(0, &[v(1.0), v(2.0), v(3.0), v(4.0)]).unwrap();
        assert_eq!(contents(&bank, 0), vec![2.0, 3.0, 4.0]);
    }

    #[test]
    fn empty_push_and_ordering() {
        let mut bank = MemoryBank::new(2, vec![10]).unwrap();
        bank.push::<Vec<f64>>(0, &[]).unwrap();
        assert!(bank.is_empty(0));
        bank.push(0, &[v(1.0), v(2.0)]).unwrap();
        bank.push(0, &[v(3.0)]).unwrap();
        assert_eq!(contents(&bank, 0), vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let mut bank = MemoryBank::new(2, vec![10]).unwrap();
        assert!(matches!(bank.push(0, &[vec![1.0]]), Err(Error::Shape(_))));
        assert!(bank.push(3, &[v(1.0)]).is_err());
    }

    #[test]
    fn sampling_regimes() {
        let mut bank = MemoryBank::new(2, vec![1000, 1000]).unwrap();
        let big: Vec<Vec<f64>> = (0..300).map(|i| v(i as f64)).collect();
        bank.push(0, &big).unwrap();
        let mut rng = stream(3, Stream::BankSampling);
        let s = bank.sample(0, 256, &mut rng).unwrap();
        let mut ids: Vec<i64> = s.iter().map(|x| x[0] as i64).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 256);

        let small: Vec<Vec<f64>> = (0..10).map(|i| v(i as f64)).collect();
        bank.push(1, &small).unwrap();
        let s = bank.sample(1, 256, &mut rng).unwrap();
        assert_eq!(s.len(), 256);
        assert!(s.iter().all(|x| (0.0..10.0).contains(&x[0])));

        let empty = MemoryBank::new(2, vec![5]).unwrap();
        assert!(empty.sample(0, 4, &mut rng).is_none());
    }

    #[test]
    fn sampling_is_deterministic() {
        let mut bank = MemoryBank::new(2, vec![50]).unwrap();
        let xs: Vec<Vec<f64>> = (0..40).map(|i| v(i as f64)).collect();
        bank.push(0, &xs).unwrap();
        let a = bank.sample(0, 16, &mut stream(5, Stream::BankSampling)).unwrap();
        let b = bank.sample(0, 16, &mut stream(5, Stream::BankSampling)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn background_capacity() {
        let bank = MemoryBank::with_background(4, 3, 0, 50, 30).unwrap();
        assert_eq!((bank.capacity(0), bank.capacity(1), bank.capacity(2)), (50, 30, 30));
    }

    #[test]
    fn snapshot_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut bank = MemoryBank::with_background(2, 3, 0, 5, 3).unwrap();
        bank.push(0, &[v(1.0), v(2.0)]).unwrap();
        bank.push(2, &[v(7.0), v(8.0), v(9.0), v(10.0)]).unwrap();
        bank.save(dir.path()).unwrap();
        let back = MemoryBank::load(dir.path()).unwrap();
        assert_eq!(back, bank);
    }
}
