//! Input panels in `(0, 1)`: Sobol' points (optionally digitally shifted)
//! or a seeded ChaCha stream, plus the named column layout that ties panel
//! columns to independent inputs, block leads, latents and auxiliary
//! uniforms.

use crate::error::{Error, Result};
use crate::representations::{BlockStructure, Representation};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::sync::OnceLock;

/// Bundled direction numbers (`d s a m_1 .. m_s` per line, dimension 1
/// implicit).
const JOE_KUO: &str = include_str!("../data/new-joe-kuo-1024.txt");

const BITS: usize = 32;

/// Smallest value a panel entry may take.
pub const NUDGE: f64 = 5.421_010_862_427_522e-20; // 2^-64

fn direction_table() -> &'static Vec<[u32; BITS]> {
    static TABLE: OnceLock<Vec<[u32; BITS]>> = OnceLock::new();
    TABLE.get_or_init(|| parse_direction_numbers(JOE_KUO).expect("bundled direction numbers parse"))
}

/// Parses a Joe–Kuo direction-number file into per-dimension direction
/// integers; dimension 1 (the van der Corput sequence) is prepended.
pub fn parse_direction_numbers(text: &str) -> Result<Vec<[u32; BITS]>> {
    let mut first = [0u32; BITS];
    for (k, v) in first.iter_mut().enumerate() {
        *v = 1u32 << (BITS - 1 - k);
    }
    let mut table = vec![first];
    for (lineno, line) in text.lines().enumerate().skip(1) {
        let bad = |msg: &str| Error::Parse {
            line: lineno + 1,
            column: 1,
            message: msg.to_string(),
        };
        let fields: Vec<u64> = line
            .split_whitespace()
            .map(|t| t.parse::<u64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad("non-integer field"))?;
        if fields.is_empty() {
            continue;
        }
        if fields.len() < 3 {
            return Err(bad("expected d, s, a, m_1..m_s"));
        }
        let (s, a) = (fields[1] as usize, fields[2] as u32);
        let m = &fields[3..];
        if s == 0 || m.len() != s || s > BITS {
            return Err(bad("degree does not match the number of m values"));
        }
        let mut v = [0u32; BITS];
        for k in 0..s {
            v[k] = (m[k] as u32) << (BITS - 1 - k);
        }
        for k in s..BITS {
            let mut x = v[k - s] ^ (v[k - s] >> s);
            for l in 1..s {
                if (a >> (s - 1 - l)) & 1 == 1 {
                    x ^= v[k - l];
                }
            }
            v[k] = x;
        }
        table.push(v);
    }
    Ok(table)
}

/// Number of Sobol' dimensions available.
pub fn max_sobol_dims() -> usize {
    direction_table().len()
}

#[inline]
fn to_unit(bits: u32) -> f64 {
    let v = bits as f64 / 4_294_967_296.0;
    if v <= 0.0 {
        NUDGE
    } else {
        v
    }
}

/// Points `skip .. skip + n` of the Sobol' sequence in dimensions
/// `first_dim .. first_dim + dims`, row-major, XOR-shifted by `shifts`.
pub fn sobol_points(n: usize, first_dim: usize, dims: usize, skip: usize, shifts: Option<&[u32]>) -> Result<Vec<f64>> {
    let table = direction_table();
    if first_dim + dims > table.len() {
        return Err(Error::Config(format!(
            "Sobol' dimension {} exceeds the {} bundled dimensions",
            first_dim + dims,
            table.len()
        )));
    }
    if (skip + n) as u64 > 1u64 << BITS {
        return Err(Error::Config("too many Sobol' points requested".into()));
    }
    let dirs = &table[first_dim..first_dim + dims];
    let mut state = vec![0u32; dims];
    let mut out = Vec::with_capacity(n * dims);
    for i in 0..skip + n {
        if i > 0 {
            let c = (i - 1).trailing_ones() as usize;
            for (s, d) in state.iter_mut().zip(dirs) {
                *s ^= d[c];
            }
        }
        if i >= skip {
            for (k, &s) in state.iter().enumerate() {
                let shift = shifts.map_or(0, |sh| sh[k]);
                out.push(to_unit(s ^ shift));
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator {
    Sobol,
    Prng,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PanelId {
    First,
    Second,
}

/// What a panel column feeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(tag = "role", rename_all = "snake_case")]
pub enum ColumnRole {
    /// Input of the independent block (1-based global index).
    Independent { index: usize },
    /// Conditioning input of dependent block `block` (0-based).
    Lead { block: usize },
    Latent { block: usize, position: usize },
    LeadLambda { block: usize },
    Sign { block: usize, position: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Column {
    pub name: String,
    #[serde(flatten)]
    pub role: ColumnRole,
}

/// Column order: independent inputs ascending, then for every dependent
/// block its lead, latents by position, the lead `lambda` (blocks with a
/// discrete margin) and the Rademacher uniforms (absolute-value symmetric
/// blocks).
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ColumnLayout {
    pub columns: Vec<Column>,
}

impl ColumnLayout {
    pub fn for_structure(structure: &BlockStructure) -> Self {
        let mut columns = Vec::new();
        for &i in structure.independent() {
            columns.push(Column {
                name: format!("x{i}"),
                role: ColumnRole::Independent { index: i },
            });
        }
        for (b, block) in structure.dependent().iter().enumerate() {
            let tag = format!("b{}", b + 2);
            columns.push(Column {
                name: format!("{tag}.lead"),
                role: ColumnRole::Lead { block: b },
            });
            for p in 1..block.dim() {
                columns.push(Column {
                    name: format!("{tag}.z{p}"),
                    role: ColumnRole::Latent { block: b, position: p },
                });
            }
            if block.family.has_discrete_margin() {
                columns.push(Column {
                    name: format!("{tag}.lambda"),
                    role: ColumnRole::LeadLambda { block: b },
                });
            }
            if block.family.is_abs_symmetric() {
                for p in 1..block.dim() {
                    columns.push(Column {
                        name: format!("{tag}.sign{p}"),
                        role: ColumnRole::Sign { block: b, position: p },
                    });
                }
            }
        }
        ColumnLayout { columns }
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    pub fn position_of(&self, role: ColumnRole) -> Option<usize> {
        self.columns.iter().position(|c| c.role == role)
    }
}

/// How panels are generated.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePlan {
    pub generator: Generator,
    pub seed: u64,
    /// Digital shift for Sobol' panels (ignored for the PRNG).
    pub scramble: bool,
    pub layout: ColumnLayout,
    /// Leading points dropped (the Sobol' origin by default).
    pub skip: usize,
}

impl SamplePlan {
    pub fn new(generator: Generator, seed: u64, layout: ColumnLayout) -> Self {
        SamplePlan {
            generator,
            seed,
            scramble: generator == Generator::Sobol,
            layout,
            skip: if generator == Generator::Sobol { 1 } else { 0 },
        }
    }

    pub fn dims(&self) -> usize {
        self.layout.len()
    }
}

/// An `m × dims` matrix of uniforms, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Panel {
    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, k: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.data[i * self.cols + k]).collect()
    }
}

/// Generates panel 1 or 2. Sobol' panel 2 takes the next block of
/// dimensions; PRNG panels use distinct ChaCha streams.
pub fn generate_panel(plan: &SamplePlan, m: usize, which: PanelId) -> Result<Panel> {
    let dims = plan.dims();
    if m == 0 {
        return Err(Error::Config("panel needs at least one row".into()));
    }
    let data = match plan.generator {
        Generator::Sobol => {
            if 2 * dims > max_sobol_dims() {
                return Err(Error::Config(format!(
                    "{dims} columns per panel need {} Sobol' dimensions, only {} available",
                    2 * dims,
                    max_sobol_dims()
                )));
            }
            let first = match which {
                PanelId::First => 0,
                PanelId::Second => dims,
            };
            let shifts = plan.scramble.then(|| {
                let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
                let all: Vec<u32> = (0..2 * dims).map(|_| rng.next_u32()).collect();
                all[first..first + dims].to_vec()
            });
            sobol_points(m, first, dims, plan.skip, shifts.as_deref())?
        }
        Generator::Prng => {
            let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
            rng.set_stream(match which {
                PanelId::First => 1,
                PanelId::Second => 2,
            });
            for _ in 0..plan.skip * dims {
                rng.next_u64();
            }
            (0..m * dims)
                .map(|_| {
                    let v: f64 = rng.random();
                    if v <= 0.0 {
                        NUDGE
                    } else {
                        v
                    }
                })
                .collect()
        }
    };
    Ok(Panel { rows: m, cols: dims, data })
}

/// Independent inputs of a representation for one panel row.
#[derive(Debug, Clone, PartialEq)]
pub struct InputTuple {
    /// `(index, value)` for the independent block.
    pub independent: Vec<(usize, f64)>,
    /// Slot values per dependent block, in the block model's slot order.
    pub blocks: Vec<Vec<f64>>,
}

/// Pushes a row of uniforms through margins and latent laws.
pub fn map_to_inputs(row: &[f64], layout: &ColumnLayout, rep: &Representation) -> Result<InputTuple> {
    if row.len() != layout.len() || rep.layout_len() != layout.len() {
        return Err(Error::Config(format!(
            "row of {} values does not fit a layout of {} columns",
            row.len(),
            layout.len()
        )));
    }
    Ok(rep.map_row(row))
}
