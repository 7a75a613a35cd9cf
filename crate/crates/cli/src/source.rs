//! Matrix input shared by the subcommands.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Args;
use lrspike::mm::read_matrix_market;
use lrspike::reorder::Reordering;
use lrspike::study::{Provenance, SyntheticMatrix};
use lrspike::{CsrMatrix, DenseBlock};

#[derive(Args)]
pub struct MatrixSource {
    /// Sparse Matrix Market file.
    #[arg(long = "in", conflicts_with = "synthetic")]
    input: Option<PathBuf>,
    /// Generated matrix as JSON, e.g. '{"kind":"banded","n":400,"k":8,"dominance":1.5,"seed":1}'.
    #[arg(long)]
    synthetic: Option<String>,
    /// Run the strip, scale and RCM pipeline before use.
    #[arg(long)]
    reorder: bool,
}

pub struct Loaded {
    pub name: String,
    pub matrix: CsrMatrix,
    pub original_rows: usize,
    reordering: Option<Reordering>,
}

impl MatrixSource {
    pub fn load(&self) -> Result<Loaded> {
        let (name, a) = match (&self.input, &self.synthetic) {
            (Some(path), _) => (path.display().to_string(), read_matrix_market(path)?),
            (None, Some(json)) => {
                let s: SyntheticMatrix =
                    serde_json::from_str(json).context("parsing --synthetic")?;
                (json.clone(), s.build())
            }
            (None, None) => bail!("one of --in or --synthetic is required"),
        };
        let original_rows = a.n_rows();
        if !self.reorder {
            return Ok(Loaded {
                name,
                matrix: a,
                original_rows,
                reordering: None,
            });
        }
        let r = Reordering::new(&a)?;
        Ok(Loaded {
            name,
            matrix: r.matrix.clone(),
            original_rows,
            reordering: Some(r),
        })
    }
}

impl Loaded {
    pub fn map_rhs(&self, f: &DenseBlock) -> DenseBlock {
        match &self.reordering {
            Some(r) => r.map_rhs(f),
            None => f.clone(),
        }
    }

    pub fn unmap_solution(&self, z: &DenseBlock, f: &DenseBlock) -> DenseBlock {
        match &self.reordering {
            Some(r) => r.unmap_solution(z, f),
            None => z.clone(),
        }
    }

    pub fn provenance(&self, seed: u64) -> Provenance {
        let pipeline = if self.reordering.is_some() {
            "strip+scale+rcm"
        } else {
            "none"
        };
        Provenance {
            matrix: self.name.clone(),
            pipeline: pipeline.into(),
            seed,
        }
    }
}
