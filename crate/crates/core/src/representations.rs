//! Block structures, permutation selection for dependent blocks, the
//! minimal representation counts, routing of input subsets to
//! representations, and the composed evaluators `g_ℓ`.
//!
//! Permutations are stored with 1-based local indices (`1..=d_k`) as in the
//! selection procedure, and translated to global input indices through the
//! block's index list.

use crate::depmodel::{DependencyModel, DmFamily, SlotKind};
use crate::error::{Error, Result};
use crate::linalg::binomial;
use crate::margins::{clamp_open, Margin, MarginSpec};
use crate::models::Model;
use crate::sampling::{ColumnLayout, ColumnRole, InputTuple};
use serde::Serialize;
use std::collections::BTreeSet;
use std::sync::Arc;

/// `d/2` for even `d`, `(d+1)/2` for odd `d`.
pub fn j0(d: usize) -> Result<usize> {
    if d < 2 {
        return Err(Error::Domain(format!("dependent block size must be >= 2, got {d}")));
    }
    Ok(d.div_ceil(2))
}

/// Selected permutations of one dependent block.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BlockPlan {
    pub d: usize,
    pub j0: usize,
    /// 1-based local permutations, in selection order.
    pub permutations: Vec<Vec<usize>>,
    /// Every prefix set of every selected permutation (sorted, by size).
    pub prefix_family: Vec<Vec<usize>>,
    /// The suffix sets recorded during selection (sorted, by size).
    pub suffix_family: Vec<Vec<usize>>,
    /// Accepted permutations later withdrawn by the search.
    pub backtracks: usize,
}

fn mask_to_set(mask: u32, d: usize) -> Vec<usize> {
    (0..d).filter(|k| mask >> k & 1 == 1).map(|k| k + 1).collect()
}

fn sorted_family(masks: impl Iterator<Item = u32>, d: usize) -> Vec<Vec<usize>> {
    let mut sets: Vec<Vec<usize>> = masks.map(|m| mask_to_set(m, d)).collect();
    sets.sort_by(|a, b| a.len().cmp(&b.len()).then_with(|| a.cmp(b)));
    sets
}

#[derive(Clone)]
struct SelectState {
    in_a: Vec<bool>,
    a_left: usize,
    in_b: Vec<bool>,
    in_e: Vec<bool>,
    e0: usize,
    i: u128,
}

struct Selector {
    d: usize,
    j0: usize,
    full: u32,
    nodes: u64,
    budget: u64,
}

impl Selector {
    /// First permutation (0-based) in lexicographic order, strictly after
    /// `after` when given, satisfying the three acceptance conditions.
    fn find(&mut self, st: &SelectState, after: Option<&[usize]>) -> Result<Option<Vec<usize>>> {
        let mut perm = Vec::with_capacity(self.d);
        let found = self.dfs(st, &mut perm, 0, after, after.is_some())?;
        Ok(found.then_some(perm))
    }

    fn prefix_ok(&self, st: &SelectState, len: usize, mask: u32) -> bool {
        if (st.e0..=self.j0).contains(&len) && st.in_b[mask as usize] {
            return false;
        }
        if len == self.j0 && !st.in_a[mask as usize] {
            return false;
        }
        // The suffix of length d - len is the complement of this prefix.
        let s = self.d - len;
        if (st.e0..=self.j0).contains(&s) && st.in_e[(self.full ^ mask) as usize] {
            return false;
        }
        true
    }

    fn dfs(&mut self, st: &SelectState, perm: &mut Vec<usize>, mask: u32, after: Option<&[usize]>, tight: bool) -> Result<bool> {
        self.nodes += 1;
        if self.nodes > self.budget {
            return Err(Error::Invariant(format!(
                "permutation search exceeded {} nodes for d = {}",
                self.budget, self.d
            )));
        }
        let pos = perm.len();
        if pos == self.d {
            return Ok(!tight);
        }
        let lo = if tight { after.unwrap()[pos] } else { 0 };
        for e in lo..self.d {
            if mask >> e & 1 == 1 {
                continue;
            }
            let next = mask | 1 << e;
            if !self.prefix_ok(st, pos + 1, next) {
                continue;
            }
            perm.push(e);
            if self.dfs(st, perm, next, after, tight && e == lo)? {
                return Ok(true);
            }
            perm.pop();
        }
        Ok(false)
    }

    fn accept(&self, st: &mut SelectState, perm: &[usize]) {
        let d = self.d;
        let mut masks = Vec::with_capacity(d + 1);
        let mut m = 0u32;
        masks.push(0);
        for &e in perm {
            m |= 1 << e;
            masks.push(m);
        }
        let jm = masks[self.j0] as usize;
        st.in_a[jm] = false;
        st.a_left -= 1;
        for len in st.e0..=(d + 1 - st.e0).min(d) {
            st.in_b[masks[len] as usize] = true;
        }
        // {w_j, ..., w_d} for j = j0+1 ..= d-e0+1 (1-based j).
        for j in (self.j0 + 1)..=(d + 1 - st.e0) {
            st.in_e[(self.full ^ masks[j - 1]) as usize] = true;
        }
        st.i += 1;
        if binomial(d, st.e0) < st.i && st.i <= binomial(d, st.e0 + 1) {
            st.e0 += 1;
        }
    }
}

fn covers_power_set(perms: &[Vec<usize>], d: usize) -> bool {
    let mut seen = vec![false; 1 << d];
    for p in perms {
        let mut m = 0usize;
        for &e in p {
            m |= 1 << e;
            seen[m] = true;
        }
    }
    seen.iter().skip(1).all(|&s| s)
}

/// Selects `C(d, j0)` permutations whose prefixes cover every nonempty
/// subset of `{1..d}`.
///
/// Each step takes the lexicographically first permutation meeting the
/// prefix/suffix/`A` conditions; when a step finds none, or the final family
/// misses a subset, earlier choices are revisited in order.
pub fn select_permutations(d: usize) -> Result<BlockPlan> {
    let j = j0(d)?;
    if d > 20 {
        return Err(Error::Domain(format!("block size {d} too large for permutation selection")));
    }
    let n = 1usize << d;
    let mut in_a = vec![false; n];
    let mut a_left = 0;
    for (mask, flag) in in_a.iter_mut().enumerate() {
        if (mask as u32).count_ones() as usize == j {
            *flag = true;
            a_left += 1;
        }
    }
    let mut sel = Selector {
        d,
        j0: j,
        full: (n - 1) as u32,
        nodes: 0,
        budget: 2_000_000_000,
    };
    let init = SelectState {
        in_a,
        a_left,
        in_b: vec![false; n],
        in_e: vec![false; n],
        e0: 1,
        i: 1,
    };
    // Chronological backtracking over the accepted permutations.
    let mut states = vec![init];
    let mut chosen: Vec<Vec<usize>> = Vec::new();
    let mut resume: Option<Vec<usize>> = None;
    let mut backtracks = 0;
    loop {
        let st = states.last().unwrap();
        if st.a_left == 0 {
            if covers_power_set(&chosen, d) {
                break;
            }
        } else if let Some(p) = sel.find(st, resume.as_deref())? {
            let mut next = st.clone();
            sel.accept(&mut next, &p);
            states.push(next);
            chosen.push(p);
            resume = None;
            continue;
        }
        // Dead end: undo the last choice and look past it.
        match chosen.pop() {
            Some(p) => {
                states.pop();
                backtracks += 1;
                resume = Some(p);
            }
            None => {
                return Err(Error::Invariant(format!("permutation search exhausted for d = {d}")));
            }
        }
    }
    let final_state = states.last().unwrap();
    let prefix_masks: BTreeSet<u32> = chosen
        .iter()
        .flat_map(|p| {
            p.iter().scan(0u32, |m, &e| {
                *m |= 1 << e;
                Some(*m)
            })
        })
        .collect();
    let suffix_masks = (1..n as u32).filter(|&m| final_state.in_e[m as usize]);
    Ok(BlockPlan {
        d,
        j0: j,
        permutations: chosen.iter().map(|p| p.iter().map(|e| e + 1).collect()).collect(),
        prefix_family: sorted_family(prefix_masks.into_iter(), d),
        suffix_family: sorted_family(suffix_masks, d),
        backtracks,
    })
}

/// `Π C(d_k, j0_k)`.
pub fn r_min(dims: &[usize]) -> Result<u128> {
    dims.iter().try_fold(1u128, |acc, &d| Ok(acc * binomial(d, j0(d)?)))
}

/// `max_k C(d_k, p_k)` with `0 <= p_k <= j0_k`; 1 when every cap is 0.
pub fn r_p(dims: &[usize], caps: &[usize]) -> Result<u128> {
    if dims.len() != caps.len() {
        return Err(Error::Domain(format!("{} block sizes but {} caps", dims.len(), caps.len())));
    }
    let mut best = 1u128;
    for (&d, &p) in dims.iter().zip(caps) {
        let j = j0(d)?;
        if p > j {
            return Err(Error::Domain(format!("cap {p} exceeds j0 = {j} for a block of size {d}")));
        }
        best = best.max(binomial(d, p));
    }
    Ok(best)
}

/// A dependent block: global indices (1-based) and the model blueprint.
#[derive(Debug, Clone)]
pub struct DependentBlock {
    pub indices: Vec<usize>,
    pub family: DmFamily,
}

impl DependentBlock {
    pub fn dim(&self) -> usize {
        self.indices.len()
    }
}

/// Partition of `{1..d}` into an independent block and dependent blocks.
#[derive(Debug, Clone)]
pub struct BlockStructure {
    d: usize,
    independent: Vec<usize>,
    independent_margins: Vec<Margin>,
    dependent: Vec<DependentBlock>,
}

impl BlockStructure {
    /// `independent` pairs each index with its margin.
    pub fn new(independent: Vec<(usize, MarginSpec)>, dependent: Vec<DependentBlock>) -> Result<Self> {
        let mut indep = independent;
        indep.sort_by_key(|(i, _)| *i);
        let d = indep.len() + dependent.iter().map(|b| b.indices.len()).sum::<usize>();
        let mut seen = vec![false; d + 1];
        let mut mark = |i: usize| -> Result<()> {
            if i == 0 || i > d {
                return Err(Error::Construction(format!("input index {i} outside 1..={d}")));
            }
            if seen[i] {
                return Err(Error::Construction(format!("input index {i} appears in two blocks")));
            }
            seen[i] = true;
            Ok(())
        };
        for (i, _) in &indep {
            mark(*i)?;
        }
        for b in &dependent {
            if b.indices.len() < 2 {
                return Err(Error::Construction(format!(
                    "dependent block {:?} must contain at least 2 inputs",
                    b.indices
                )));
            }
            if b.family.dim() != b.indices.len() {
                return Err(Error::Construction(format!(
                    "block {:?} has {} indices but its model has dimension {}",
                    b.indices,
                    b.indices.len(),
                    b.family.dim()
                )));
            }
            for &i in &b.indices {
                mark(i)?;
            }
        }
        let independent_margins = indep
            .iter()
            .map(|(_, m)| Margin::new(m.clone()))
            .collect::<Result<Vec<_>>>()?;
        Ok(BlockStructure {
            d,
            independent: indep.into_iter().map(|(i, _)| i).collect(),
            independent_margins,
            dependent,
        })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    /// Number of blocks `K`, counting the (possibly empty) independent one.
    pub fn k(&self) -> usize {
        1 + self.dependent.len()
    }

    pub fn independent(&self) -> &[usize] {
        &self.independent
    }

    pub fn independent_margins(&self) -> &[Margin] {
        &self.independent_margins
    }

    pub fn dependent(&self) -> &[DependentBlock] {
        &self.dependent
    }

    pub fn dependent_dims(&self) -> Vec<usize> {
        self.dependent.iter().map(|b| b.dim()).collect()
    }

    /// Dependent block holding global index `i`, with the local position.
    pub fn locate(&self, i: usize) -> Option<(usize, usize)> {
        self.dependent
            .iter()
            .enumerate()
            .find_map(|(b, blk)| blk.indices.iter().position(|&g| g == i).map(|l| (b, l)))
    }
}

/// Per-block permutation selections, with global indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PermutationPlan {
    pub blocks: Vec<PlanEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PlanEntry {
    pub indices: Vec<usize>,
    pub j0: usize,
    /// Selected permutations with global indices.
    pub permutations: Vec<Vec<usize>>,
    #[serde(skip)]
    pub local: BlockPlan,
}

impl PermutationPlan {
    pub fn for_structure(structure: &BlockStructure) -> Result<Self> {
        let mut blocks = Vec::new();
        for b in structure.dependent() {
            let local = select_permutations(b.dim())?;
            let permutations = local
                .permutations
                .iter()
                .map(|p| p.iter().map(|&l| b.indices[l - 1]).collect())
                .collect();
            blocks.push(PlanEntry {
                indices: b.indices.clone(),
                j0: local.j0,
                permutations,
                local,
            });
        }
        Ok(PermutationPlan { blocks })
    }

    pub fn r_min(&self) -> u128 {
        self.blocks.iter().map(|b| b.permutations.len() as u128).product()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data serializes")
    }

    /// Canonical 0-based representation number of a label: block 2 varies
    /// fastest.
    pub fn canonical_index(&self, label: &Label) -> usize {
        let mut idx = 0;
        let mut stride = 1;
        for (b, &l) in label.0.iter().enumerate() {
            idx += l * stride;
            stride *= self.blocks[b].permutations.len();
        }
        idx
    }

    pub fn label_from_index(&self, mut idx: usize) -> Label {
        let mut out = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let n = b.permutations.len();
            out.push(idx % n);
            idx /= n;
        }
        Label(out)
    }

    pub fn all_labels(&self) -> Vec<Label> {
        (0..self.r_min() as usize).map(|i| self.label_from_index(i)).collect()
    }

    /// Permutations allowed for block `b` when conditioning on `u`: those
    /// with `u ∩ π_b` as a prefix, or all when the block is untouched.
    pub fn allowed(&self, b: usize, u: &[usize]) -> Vec<usize> {
        let blk = &self.blocks[b];
        let part: BTreeSet<usize> = u.iter().copied().filter(|i| blk.indices.contains(i)).collect();
        if part.is_empty() {
            return (0..blk.permutations.len()).collect();
        }
        let p = part.len();
        (0..blk.permutations.len())
            .filter(|&k| blk.permutations[k][..p].iter().copied().collect::<BTreeSet<_>>() == part)
            .collect()
    }

    pub fn compatible(&self, label: &Label, u: &[usize]) -> bool {
        (0..self.blocks.len()).all(|b| self.allowed(b, u).contains(&label.0[b]))
    }
}

/// Index into `P_k` for every dependent block.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct Label(pub Vec<usize>);

/// Inputs that a routed subset conditions on, named `x<i>` for inputs,
/// `z<i>` for latents and `lambda<i>` for transform uniforms.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Conditioning {
    pub variables: Vec<String>,
}

fn conditioning_for(plan: &PermutationPlan, structure: &BlockStructure, label: &Label, u: &[usize]) -> Conditioning {
    let mut vars: Vec<String> = structure
        .independent()
        .iter()
        .filter(|i| u.contains(i))
        .map(|i| format!("x{i}"))
        .collect();
    for (b, blk) in plan.blocks.iter().enumerate() {
        let p = u.iter().filter(|i| blk.indices.contains(i)).count();
        if p == 0 {
            continue;
        }
        let perm = &blk.permutations[label.0[b]];
        vars.push(format!("x{}", perm[0]));
        if structure.dependent()[b].family.has_discrete_margin() {
            vars.push(format!("lambda{}", perm[0]));
        }
        for &w in &perm[1..p] {
            vars.push(format!("z{w}"));
        }
    }
    Conditioning { variables: vars }
}

/// Routes one subset: per touched block the first permutation in `P_k`
/// order with `u ∩ π_k` as prefix; untouched blocks take the first one.
pub fn route_subset(plan: &PermutationPlan, structure: &BlockStructure, u: &[usize]) -> Result<(Label, Conditioning)> {
    validate_subset(structure, u)?;
    let label = Label(
        (0..plan.blocks.len())
            .map(|b| {
                plan.allowed(b, u)
                    .first()
                    .copied()
                    .ok_or_else(|| Error::Invariant(format!("no permutation of block {} has {u:?} as prefix", b + 2)))
            })
            .collect::<Result<Vec<_>>>()?,
    );
    let cond = conditioning_for(plan, structure, &label, u);
    Ok((label, cond))
}

pub fn validate_subset(structure: &BlockStructure, u: &[usize]) -> Result<()> {
    if u.is_empty() {
        return Err(Error::Domain("input subset must be nonempty".into()));
    }
    let mut seen = BTreeSet::new();
    for &i in u {
        if i == 0 || i > structure.d() {
            return Err(Error::Domain(format!("input index {i} out of range 1..={}", structure.d())));
        }
        if !seen.insert(i) {
            return Err(Error::Domain(format!("input index {i} repeated in subset")));
        }
    }
    Ok(())
}

/// One subset's routing outcome.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RouteEntry {
    pub subset: Vec<usize>,
    /// Canonical representation number (0-based).
    pub representation: usize,
    pub label: Label,
    pub conditioning: Conditioning,
}

/// Labels needed for a list of subsets and the route of each subset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RoutingPlan {
    /// Built labels, in canonical order.
    pub labels: Vec<Label>,
    pub routes: Vec<RouteEntry>,
    /// For every built label, all requested subsets it can serve.
    pub serves: Vec<Vec<Vec<usize>>>,
}

impl RoutingPlan {
    /// Greedy merge: each subset joins the first partial label whose allowed
    /// sets still intersect in every block, else opens a new one; partial
    /// labels then resolve to their first allowed permutation per block.
    pub fn build(plan: &PermutationPlan, structure: &BlockStructure, subsets: &[Vec<usize>]) -> Result<Self> {
        let nb = plan.blocks.len();
        let mut partial: Vec<Vec<BTreeSet<usize>>> = Vec::new();
        for u in subsets {
            validate_subset(structure, u)?;
            let allowed: Vec<BTreeSet<usize>> = (0..nb).map(|b| plan.allowed(b, u).into_iter().collect()).collect();
            if allowed.iter().any(|a| a.is_empty()) {
                return Err(Error::Invariant(format!("subset {u:?} has no prefix-consistent permutation")));
            }
            let slot = partial.iter_mut().find(|p| (0..nb).all(|b| !p[b].is_disjoint(&allowed[b])));
            match slot {
                Some(p) => {
                    for b in 0..nb {
                        p[b] = p[b].intersection(&allowed[b]).copied().collect();
                    }
                }
                None => partial.push(allowed),
            }
        }
        let mut labels: Vec<Label> = partial
            .iter()
            .map(|p| Label(p.iter().map(|s| *s.iter().next().unwrap()).collect()))
            .collect();
        if labels.is_empty() {
            labels.push(Label(vec![0; nb]));
        }
        labels.sort_by_key(|l| plan.canonical_index(l));
        labels.dedup();
        let mut routes = Vec::with_capacity(subsets.len());
        for u in subsets {
            let label = labels
                .iter()
                .find(|l| plan.compatible(l, u))
                .cloned()
                .ok_or_else(|| Error::Invariant(format!("subset {u:?} lost during routing")))?;
            routes.push(RouteEntry {
                subset: u.clone(),
                representation: plan.canonical_index(&label),
                conditioning: conditioning_for(plan, structure, &label, u),
                label,
            });
        }
        let serves = labels
            .iter()
            .map(|l| subsets.iter().filter(|u| plan.compatible(l, u)).cloned().collect())
            .collect();
        Ok(RoutingPlan { labels, routes, serves })
    }
}

#[derive(Debug, Clone)]
struct BuiltBlock {
    dm: DependencyModel,
    /// Global 0-based input index of each model output, in model order.
    outputs: Vec<usize>,
    /// Panel column feeding each slot.
    columns: Vec<usize>,
}

/// `g_ℓ`: the model composed with per-block dependency models, taking only
/// independent inputs.
#[derive(Debug, Clone)]
pub struct Representation {
    label: Label,
    index: usize,
    /// Permutation (global indices) per dependent block.
    permutations: Vec<Vec<usize>>,
    independent: Vec<(usize, usize, Margin)>,
    blocks: Vec<BuiltBlock>,
    layout: ColumnLayout,
    model: Arc<dyn Model>,
}

/// Builds `g_ℓ` for `label` over the structure's column layout.
pub fn build_representation(structure: &BlockStructure, plan: &PermutationPlan, model: Arc<dyn Model>, label: &Label) -> Result<Representation> {
    if model.input_dim() != structure.d() {
        return Err(Error::Construction(format!(
            "model takes {} inputs but the block structure has {}",
            model.input_dim(),
            structure.d()
        )));
    }
    if label.0.len() != plan.blocks.len() || label.0.iter().zip(&plan.blocks).any(|(&l, b)| l >= b.permutations.len()) {
        return Err(Error::Construction(format!("label {:?} does not fit the permutation plan", label.0)));
    }
    let layout = ColumnLayout::for_structure(structure);
    let col = |role: ColumnRole| {
        layout
            .position_of(role)
            .ok_or_else(|| Error::Invariant(format!("layout lacks column {role:?}")))
    };
    let mut independent = Vec::new();
    for (&i, m) in structure.independent().iter().zip(structure.independent_margins()) {
        independent.push((col(ColumnRole::Independent { index: i })?, i - 1, m.clone()));
    }
    let mut blocks = Vec::new();
    let mut permutations = Vec::new();
    for (b, blk) in structure.dependent().iter().enumerate() {
        let local_perm = &plan.blocks[b].local.permutations[label.0[b]];
        let order: Vec<usize> = local_perm.iter().map(|l| l - 1).collect();
        let dm = blk.family.build(&order)?;
        let outputs = order.iter().map(|&l| blk.indices[l] - 1).collect();
        let columns = dm
            .slots()
            .iter()
            .map(|s| match s.kind {
                SlotKind::Lead => col(ColumnRole::Lead { block: b }),
                SlotKind::Latent(_) => col(ColumnRole::Latent {
                    block: b,
                    position: s.position,
                }),
                SlotKind::LeadLambda => col(ColumnRole::LeadLambda { block: b }),
                SlotKind::Sign => col(ColumnRole::Sign {
                    block: b,
                    position: s.position,
                }),
            })
            .collect::<Result<Vec<_>>>()?;
        permutations.push(plan.blocks[b].permutations[label.0[b]].clone());
        blocks.push(BuiltBlock { dm, outputs, columns });
    }
    Ok(Representation {
        label: label.clone(),
        index: plan.canonical_index(label),
        permutations,
        independent,
        blocks,
        layout,
        model,
    })
}

impl Representation {
    pub fn label(&self) -> &Label {
        &self.label
    }

    /// Canonical 0-based number.
    pub fn index(&self) -> usize {
        self.index
    }

    pub fn permutations(&self) -> &[Vec<usize>] {
        &self.permutations
    }

    pub fn layout(&self) -> &ColumnLayout {
        &self.layout
    }

    pub fn layout_len(&self) -> usize {
        self.layout.len()
    }

    pub fn model(&self) -> &Arc<dyn Model> {
        &self.model
    }

    pub fn output_dim(&self) -> usize {
        self.model.output_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.model.input_dim()
    }

    /// Count of independent variables consumed per evaluation.
    pub fn independent_count(&self) -> usize {
        self.independent.len() + self.blocks.iter().map(|b| b.dm.slots().len()).sum::<usize>()
    }

    pub fn map_row(&self, row: &[f64]) -> InputTuple {
        InputTuple {
            independent: self
                .independent
                .iter()
                .map(|(c, i, m)| (i + 1, m.quantile_interior(clamp_open(row[*c]))))
                .collect(),
            blocks: self
                .blocks
                .iter()
                .map(|b| {
                    b.columns
                        .iter()
                        .enumerate()
                        .map(|(s, &c)| b.dm.sample_slot(s, row[c]))
                        .collect()
                })
                .collect(),
        }
    }

    /// Full input vector `x` (global order) from a row of uniforms.
    pub fn inputs(&self, row: &[f64], x: &mut [f64]) {
        let mut slots = [0.0f64; 64];
        let mut outs = [0.0f64; 64];
        for (c, i, m) in &self.independent {
            x[*i] = m.quantile_interior(clamp_open(row[*c]));
        }
        for b in &self.blocks {
            let ns = b.columns.len();
            let nd = b.outputs.len();
            if ns <= 64 && nd <= 64 {
                for (s, &c) in b.columns.iter().enumerate() {
                    slots[s] = b.dm.sample_slot(s, row[c]);
                }
                b.dm.evaluate(&slots[..ns], &mut outs[..nd]);
                for (k, &g) in b.outputs.iter().enumerate() {
                    x[g] = outs[k];
                }
            } else {
                let sv: Vec<f64> = b.columns.iter().enumerate().map(|(s, &c)| b.dm.sample_slot(s, row[c])).collect();
                let mut ov = vec![0.0; nd];
                b.dm.evaluate(&sv, &mut ov);
                for (k, &g) in b.outputs.iter().enumerate() {
                    x[g] = ov[k];
                }
            }
        }
    }

    /// `g_ℓ(row)`; `x` is scratch of length `d`.
    pub fn evaluate_row(&self, row: &[f64], x: &mut [f64], out: &mut [f64]) -> std::result::Result<(), String> {
        self.inputs(row, x);
        self.model.evaluate(x, out)
    }

    /// Panel columns frozen when conditioning on `u`: independent inputs in
    /// `u`, and for each block whose part of `u` is a prefix of length `p`,
    /// every slot at position `< p`.
    pub fn frozen_columns(&self, structure: &BlockStructure, u: &[usize]) -> Result<Vec<usize>> {
        let mut cols = Vec::new();
        for (c, i, _) in &self.independent {
            if u.contains(&(i + 1)) {
                cols.push(*c);
            }
        }
        for (b, blk) in self.blocks.iter().enumerate() {
            let part: BTreeSet<usize> = u
                .iter()
                .copied()
                .filter(|i| structure.dependent()[b].indices.contains(i))
                .collect();
            let p = part.len();
            if p == 0 {
                continue;
            }
            let prefix: BTreeSet<usize> = self.permutations[b][..p].iter().copied().collect();
            if prefix != part {
                return Err(Error::Invariant(format!(
                    "subset {u:?} is not a prefix of block permutation {:?}",
                    self.permutations[b]
                )));
            }
            for (s, slot) in blk.dm.slots().iter().enumerate() {
                if slot.position < p {
                    cols.push(blk.columns[s]);
                }
            }
        }
        cols.sort_unstable();
        Ok(cols)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn j0_values() {
        assert_eq!(j0(2).unwrap(), 1);
        assert_eq!(j0(3).unwrap(), 2);
        assert_eq!(j0(10).unwrap(), 5);
        assert!(matches!(j0(1), Err(Error::Domain(_))));
    }

    #[test]
    fn small_blocks() {
        assert_eq!(select_permutations(2).unwrap().permutations, vec![vec![1, 2], vec![2, 1]]);
        let p3 = select_permutations(3).unwrap();
        assert_eq!(p3.permutations, vec![vec![1, 2, 3], vec![2, 3, 1], vec![3, 1, 2]]);
        assert_eq!(p3.prefix_family.len(), 7);
        let p4 = select_permutations(4).unwrap();
        assert_eq!(p4.permutations.len(), 6);
        assert_eq!(p4.prefix_family.len(), 15);
        assert_eq!(&p4.permutations[..4], &[vec![1, 2, 3, 4], vec![2, 3, 4, 1], vec![3, 1, 4, 2], vec![4, 1, 2, 3]]);
    }

    #[test]
    fn counts() {
        assert_eq!(r_min(&[3, 2]).unwrap(), 6);
        assert_eq!(r_min(&[2, 2]).unwrap(), 4);
        assert_eq!(r_min(&[3]).unwrap(), 3);
        assert_eq!(r_min(&[]).unwrap(), 1);
        assert_eq!(r_p(&[3, 2], &[1, 1]).unwrap(), 3);
        assert_eq!(r_p(&[4, 4], &[2, 2]).unwrap(), 6);
        assert_eq!(r_p(&[5, 3], &[0, 0]).unwrap(), 1);
        assert!(r_p(&[3], &[3]).is_err());
    }

    #[test]
    fn deterministic_selection() {
        assert_eq!(select_permutations(6).unwrap(), select_permutations(6).unwrap());
    }

    fn simplex_structure() -> BlockStructure {
        let u = MarginSpec::standard_uniform();
        let copula = crate::depmodel::CopulaSpec::gaussian(vec![
            vec![1.0, 0.0, 0.01],
            vec![0.0, 1.0, 0.85],
            vec![0.01, 0.85, 1.0],
        ])
        .unwrap();
        BlockStructure::new(
            (4..=8).map(|i| (i, u.clone())).collect(),
            vec![
                DependentBlock {
                    indices: vec![1, 2, 3],
                    family: DmFamily::Copula {
                        copula,
                        margins: vec![u.clone(); 3],
                    },
                },
                DependentBlock {
                    indices: vec![9, 10],
                    family: DmFamily::Simplex,
                },
            ],
        )
        .unwrap()
    }

    #[test]
    fn routing_examples() {
        let s = simplex_structure();
        let plan = PermutationPlan::for_structure(&s).unwrap();
        assert_eq!(plan.r_min(), 6);
        let (l, c) = route_subset(&plan, &s, &[4]).unwrap();
        assert_eq!(c.variables, vec!["x4"]);
        assert_eq!(l, Label(vec![0, 0]));
        let (l, c) = route_subset(&plan, &s, &[1, 2]).unwrap();
        assert_eq!(plan.blocks[0].permutations[l.0[0]][..2].iter().collect::<BTreeSet<_>>(), [1, 2].iter().collect());
        assert_eq!(c.variables, vec!["x1", "z2"]);
        let (l, _) = route_subset(&plan, &s, &[2, 9]).unwrap();
        assert_eq!(plan.blocks[0].permutations[l.0[0]][0], 2);
        assert_eq!(plan.blocks[1].permutations[l.0[1]][0], 9);
        assert!(route_subset(&plan, &s, &[11]).is_err());
        assert!(route_subset(&plan, &s, &[]).is_err());
    }

    #[test]
    fn singleton_routing_uses_three_labels() {
        let s = simplex_structure();
        let plan = PermutationPlan::for_structure(&s).unwrap();
        let singles: Vec<Vec<usize>> = (1..=10).map(|i| vec![i]).collect();
        let r = RoutingPlan::build(&plan, &s, &singles).unwrap();
        assert_eq!(r.labels.len(), 3);
        let all: Vec<Vec<usize>> = (1..1u32 << 10)
            .map(|m| (0..10).filter(|k| m >> k & 1 == 1).map(|k| k + 1).collect())
            .collect();
        let r = RoutingPlan::build(&plan, &s, &all).unwrap();
        assert_eq!(r.labels.len(), 6);
        for e in &r.routes {
            assert!(plan.compatible(&e.label, &e.subset));
        }
    }

    #[test]
    fn structure_validation() {
        let u = MarginSpec::standard_uniform();
        assert!(BlockStructure::new(vec![(1, u.clone()), (1, u.clone())], vec![]).is_err());
        assert!(BlockStructure::new(vec![(1, u.clone()), (3, u.clone())], vec![]).is_err());
        let s = BlockStructure::new(vec![(2, u.clone()), (1, u)], vec![]).unwrap();
        assert_eq!(s.independent(), &[1, 2]);
        assert_eq!(s.k(), 1);
        assert_eq!(PermutationPlan::for_structure(&s).unwrap().r_min(), 1);
    }
}
