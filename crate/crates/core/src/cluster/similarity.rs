use crate::merge::MergedMap;

/// Cosine similarities between all grid tokens, row-major cell order.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub n: usize,
    pub values: Vec<f64>,
    /// Cells whose token has zero norm; their rows and columns are 0.
    pub zero_norm: Vec<usize>,
}

impl SimilarityMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.n..(i + 1) * self.n]
    }
}

fn unit_tokens(map: &MergedMap) -> (Vec<Option<Vec<f64>>>, Vec<usize>) {
    let mut zero = Vec::new();
    let units = map
        .tokens()
        .enumerate()
        .map(|(i, t)| {
            let norm = t.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            if norm > 0.0 {
                Some(t.iter().map(|&v| v as f64 / norm).collect())
            } else {
                zero.push(i);
                None
            }
        })
        .collect();
    (units, zero)
}

fn cosine(a: &Option<Vec<f64>>, b: &Option<Vec<f64>>) -> f64 {
    match (a, b) {
        (Some(a), Some(b)) => a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>().clamp(-1.0, 1.0),
        _ => 0.0,
    }
}

pub fn similarity_matrix(map: &MergedMap) -> SimilarityMatrix {
    let (units, zero_norm) = unit_tokens(map);
    let n = units.len();
    let mut values = vec![0.0; n * n];
    for i in 0..n {
        if units[i].is_some() {
            values[i * n + i] = 1.0;
        }
        for j in i + 1..n {
            let s = cosine(&units[i], &units[j]);
            values[i * n + j] = s;
            values[j * n + i] = s;
        }
    }
    SimilarityMatrix {
        n,
        values,
        zero_norm,
    }
}

/// Similarities of every cell to `anchor` (row-major index).
pub fn similarity_curve(map: &MergedMap, anchor: usize) -> Vec<f64> {
    let (units, _) = unit_tokens(map);
    (0..units.len())
        .map(|j| {
            if j == anchor && units[j].is_some() {
                1.0
            } else {
                cosine(&units[anchor], &units[j])
            }
        })
        .collect()
}
