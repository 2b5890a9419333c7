//! Class schedules and the per-step training sets of an incremental run.
//!
//! Class ids are dataset ids with `0` reserved for background. A schedule
//! lists the initial seen set `S_0` followed by the classes `U_k` added at
//! each step; step `k` trains on samples no earlier step has used.

use std::fmt;
use std::str::FromStr;

use crate::distill::IGNORE_INDEX;
use crate::error::{Error, Result};

pub type ClassId = usize;

pub const BACKGROUND: ClassId = 0;

/// Set of class ids in `0..256`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct ClassSet([u64; 4]);

impl ClassSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, c: ClassId) {
        assert!(c < 256, "class id {c} out of range");
        self.0[c / 64] |= 1 << (c % 64);
    }

    pub fn contains(&self, c: ClassId) -> bool {
        c < 256 && self.0[c / 64] & (1 << (c % 64)) != 0
    }

    pub fn len(&self) -> usize {
        self.0.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.0 == [0; 4]
    }

    pub fn is_subset(&self, other: &ClassSet) -> bool {
        self.0.iter().zip(&other.0).all(|(a, b)| a & !b == 0)
    }

    pub fn intersects(&self, other: &ClassSet) -> bool {
        self.0.iter().zip(&other.0).any(|(a, b)| a & b != 0)
    }

    pub fn union(&self, other: &ClassSet) -> ClassSet {
        let mut out = *self;
        for (a, b) in out.0.iter_mut().zip(&other.0) {
            *a |= b;
        }
        out
    }

    pub fn iter(&self) -> impl Iterator<Item = ClassId> + '_ {
        (0..256).filter(move |&c| self.contains(c))
    }

    /// Classes present in a label map, `IGNORE_INDEX` excluded.
    pub fn from_labels(labels: &[u8]) -> ClassSet {
        let mut set = ClassSet::new();
        for &l in labels {
            if l != IGNORE_INDEX {
                set.insert(l as usize);
            }
        }
        set
    }

    /// Lowercase hex with bit `c` standing for class `c`, no leading zeros
    /// (at least one digit).
    pub fn to_hex(&self) -> String {
        let mut s = String::new();
        for word in self.0.iter().rev() {
            if s.is_empty() {
                if *word != 0 {
                    s = format!("{word:x}");
                }
            } else {
                s.push_str(&format!("{word:016x}"));
            }
        }
        if s.is_empty() {
            s.push('0');
        }
        s
    }

    pub fn from_hex(s: &str) -> Result<ClassSet> {
        if s.is_empty() || s.len() > 64 || !s.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Err(Error::Data(format!("bad class bitmask {s:?}")));
        }
        let mut out = ClassSet::new();
        for (i, ch) in s.bytes().rev().enumerate() {
            let nibble = (ch as char).to_digit(16).unwrap() as u64;
            out.0[i / 16] |= nibble << (4 * (i % 16));
        }
        Ok(out)
    }
}

impl FromIterator<ClassId> for ClassSet {
    fn from_iter<I: IntoIterator<Item = ClassId>>(iter: I) -> Self {
        let mut s = ClassSet::new();
        for c in iter {
            s.insert(c);
        }
        s
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum ClassOrdering {
    /// Dataset order.
    #[default]
    Given,
    Alphabetical,
    /// Most pixels first.
    FrequencyDescending,
}

impl FromStr for ClassOrdering {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "given" => Ok(ClassOrdering::Given),
            "alphabetical" => Ok(ClassOrdering::Alphabetical),
            "frequency" => Ok(ClassOrdering::FrequencyDescending),
            other => Err(Error::Param(format!(
                "unknown class ordering {other:?} (expected given, alphabetical, frequency)"
            ))),
        }
    }
}

impl fmt::Display for ClassOrdering {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ClassOrdering::Given => "given",
            ClassOrdering::Alphabetical => "alphabetical",
            ClassOrdering::FrequencyDescending => "frequency",
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum ScenarioMode {
    /// Old classes keep their labels in new-step data.
    #[default]
    Learning,
    /// Old classes are annotated as background in new-step data.
    Labeling,
}

impl FromStr for ScenarioMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "learning" => Ok(ScenarioMode::Learning),
            "labeling" => Ok(ScenarioMode::Labeling),
            other => {
                Err(Error::Param(format!("unknown scenario mode {other:?} (expected learning, labeling)")))
            }
        }
    }
}

impl fmt::Display for ScenarioMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScenarioMode::Learning => "learning",
            ScenarioMode::Labeling => "labeling",
        })
    }
}

/// Class content of one dataset record.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampleInfo {
    pub id: String,
    pub classes: ClassSet,
    /// Labelled pixel count per class id.
    pub pixel_counts: Vec<u64>,
}

impl SampleInfo {
    pub fn from_labels(id: impl Into<String>, labels: &[u8], num_classes: usize) -> Result<Self> {
        let mut pixel_counts = vec![0u64; num_classes];
        for &l in labels {
            if l == IGNORE_INDEX {
                continue;
            }
            let slot = pixel_counts
                .get_mut(l as usize)
                .ok_or_else(|| Error::Data(format!("label {l} out of range for {num_classes} classes")))?;
            *slot += 1;
        }
        let classes = pixel_counts.iter().enumerate().filter(|(_, &n)| n > 0).map(|(c, _)| c).collect();
        Ok(SampleInfo { id: id.into(), classes, pixel_counts })
    }
}

/// Per-record class metadata for a dataset, in dataset order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetIndex {
    pub class_names: Vec<String>,
    pub samples: Vec<SampleInfo>,
}

impl DatasetIndex {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_pixel_totals(&self) -> Vec<u64> {
        let mut totals = vec![0u64; self.num_classes()];
        for s in &self.samples {
            for (t, &n) in totals.iter_mut().zip(&s.pixel_counts) {
                *t += n;
            }
        }
        totals
    }

    pub fn class_id(&self, name: &str) -> Option<ClassId> {
        self.class_names.iter().position(|n| n == name)
    }
}

/// Orders all classes; background always comes first and ties keep dataset
/// order.
pub fn order_classes(dataset: &DatasetIndex, ordering: ClassOrdering) -> Result<Vec<ClassId>> {
    if dataset.samples.is_empty() || dataset.class_names.is_empty() {
        return Err(Error::Data("cannot order classes of an empty dataset".into()));
    }
    let mut rest: Vec<ClassId> = (1..dataset.num_classes()).collect();
    match ordering {
        ClassOrdering::Given => {}
        ClassOrdering::Alphabetical => {
            rest.sort_by(|&a, &b| dataset.class_names[a].cmp(&dataset.class_names[b]).then(a.cmp(&b)))
        }
        ClassOrdering::FrequencyDescending => {
            let totals = dataset.class_pixel_totals();
            rest.sort_by(|&a, &b| totals[b].cmp(&totals[a]).then(a.cmp(&b)));
        }
    }
    let mut out = vec![BACKGROUND];
    out.extend(rest);
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassSchedule {
    /// Every class in the chosen order, background first.
    pub all_classes: Vec<ClassId>,
    /// `S_0`.
    pub initial: Vec<ClassId>,
    /// `U_1, U_2, …`.
    pub steps: Vec<Vec<ClassId>>,
    pub ordering: ClassOrdering,
}

impl ClassSchedule {
    pub fn new(
        all_classes: Vec<ClassId>,
        initial: Vec<ClassId>,
        steps: Vec<Vec<ClassId>>,
        ordering: ClassOrdering,
    ) -> Result<Self> {
        let s = ClassSchedule { all_classes, initial, steps, ordering };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.initial.contains(&BACKGROUND) {
            return Err(Error::Scenario("background must belong to the initial class set".into()));
        }
        let universe: ClassSet = self.all_classes.iter().copied().collect();
        let mut seen = ClassSet::new();
        for (k, group) in std::iter::once(&self.initial).chain(&self.steps).enumerate() {
            if group.is_empty() {
                return Err(Error::Scenario(format!("step {k} adds no classes")));
            }
            for &c in group {
                if !universe.contains(c) {
                    return Err(Error::Scenario(format!("step {k} uses unknown class {c}")));
                }
                if seen.contains(c) {
                    return Err(Error::Scenario(format!("class {c} introduced twice")));
                }
                seen.insert(c);
            }
        }
        Ok(())
    }

    /// Number of incremental steps after the initial one.
    pub fn num_steps(&self) -> usize {
        self.steps.len()
    }

    /// Classes introduced at step `k` (`S_0` for `k = 0`).
    pub fn added(&self, k: usize) -> &[ClassId] {
        if k == 0 {
            &self.initial
        } else {
            &self.steps[k - 1]
        }
    }

    /// `S_k` in introduction order.
    pub fn seen(&self, k: usize) -> Vec<ClassId> {
        let mut out = self.initial.clone();
        for step in &self.steps[..k] {
            out.extend_from_slice(step);
        }
        out
    }

    pub fn seen_set(&self, k: usize) -> ClassSet {
        self.seen(k).into_iter().collect()
    }

    /// Model output channel of a class: its position in introduction order.
    pub fn channel_of(&self, class: ClassId) -> Option<usize> {
        self.seen(self.num_steps()).iter().position(|&c| c == class)
    }

    /// Serialises as `step <k>: <names comma-separated>`, one line per step.
    pub fn to_plan_text(&self, class_names: &[String]) -> String {
        let mut out = String::new();
        for k in 0..=self.num_steps() {
            let names: Vec<&str> = self.added(k).iter().map(|&c| class_names[c].as_str()).collect();
            out.push_str(&format!("step {k}: {}\n", names.join(",")));
        }
        out
    }

    /// Resolves a parsed plan against the dataset's class names.
    pub fn from_plan(plan: &[Vec<String>], class_names: &[String], ordering: ClassOrdering) -> Result<Self> {
        let resolve = |name: &String| {
            class_names
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| Error::Scenario(format!("plan names unknown class {name:?}")))
        };
        let mut groups = plan
            .iter()
            .map(|g| g.iter().map(resolve).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        if groups.is_empty() {
            return Err(Error::Scenario("plan has no steps".into()));
        }
        let initial = groups.remove(0);
        let all_classes = (0..class_names.len()).collect();
        ClassSchedule::new(all_classes, initial, groups, ordering)
    }
}

/// Parses the plan text format into class names per step.
pub fn parse_plan(text: &str) -> Result<Vec<Vec<String>>> {
    let mut steps = Vec::new();
    for (k, line) in text.lines().enumerate() {
        let rest = line
            .strip_prefix("step ")
            .and_then(|r| r.strip_prefix(&format!("{k}: ")))
            .ok_or_else(|| Error::Scenario(format!("line {}: expected \"step {k}: ...\"", k + 1)))?;
        let names: Vec<String> = rest.split(',').map(str::to_string).collect();
        if names.iter().any(|n| n.is_empty()) {
            return Err(Error::Scenario(format!("line {}: empty class name", k + 1)));
        }
        steps.push(names);
    }
    if steps.is_empty() {
        return Err(Error::Scenario("plan has no steps".into()));
    }
    Ok(steps)
}

/// Training samples `D_k` of one step.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StepDataset {
    pub k: usize,
    pub sample_ids: Vec<String>,
    pub mode: ScenarioMode,
}

/// Assigns samples to steps greedily in step order.
///
/// Step 0 takes samples whose classes all lie in `S_0`. Step `k ≥ 1` takes
/// unassigned samples that contain a class of `U_k` and nothing outside
/// `S_{k−1} ∪ U_k`.
pub fn build_splits(
    dataset: &DatasetIndex,
    schedule: &ClassSchedule,
    mode: ScenarioMode,
) -> Result<Vec<StepDataset>> {
    schedule.validate()?;
    let mut assigned = vec![false; dataset.samples.len()];
    let mut out = Vec::with_capacity(schedule.num_steps() + 1);
    for k in 0..=schedule.num_steps() {
        let allowed = schedule.seen_set(k);
        let added: ClassSet = schedule.added(k).iter().copied().collect();
        let mut ids = Vec::new();
        for (i, s) in dataset.samples.iter().enumerate() {
            if assigned[i] || !s.classes.is_subset(&allowed) {
                continue;
            }
            if k > 0 && !s.classes.intersects(&added) {
                continue;
            }
            assigned[i] = true;
            ids.push(s.id.clone());
        }
        if k > 0 && ids.is_empty() {
            let names: Vec<&str> = schedule
                .added(k)
                .iter()
                .map(|&c| dataset.class_names.get(c).map_or("?", String::as_str))
                .collect();
            return Err(Error::Scenario(format!(
                "no eligible training samples for step {k} (classes {})",
                names.join(", ")
            )));
        }
        out.push(StepDataset { k, sample_ids: ids, mode });
    }
    Ok(out)
}

/// Applies the annotation protocol of `mode` to a step-`k` label map.
/// In labeling mode every old class except background becomes background.
pub fn relabel(labels: &[u8], mode: ScenarioMode, seen_prev: &ClassSet, added: &ClassSet) -> Result<Vec<u8>> {
    let known = seen_prev.union(added);
    let mut out = labels.to_vec();
    for l in &mut out {
        if *l == IGNORE_INDEX {
            continue;
        }
        let c = *l as usize;
        if !known.contains(c) {
            return Err(Error::Data(format!("label {c} is neither an old nor a new class")));
        }
        if mode == ScenarioMode::Labeling && c != BACKGROUND && seen_prev.contains(c) {
            *l = BACKGROUND as u8;
        }
    }
    Ok(out)
}

/// A named class schedule shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NamedScenario {
    pub name: &'static str,
    /// Classes added per incremental step, in order.
    pub step_sizes: &'static [usize],
}

impl NamedScenario {
    pub fn added_total(&self) -> usize {
        self.step_sizes.iter().sum()
    }

    /// Builds the schedule over `ordered` classes (background first).
    pub fn build(&self, ordered: &[ClassId], ordering: ClassOrdering) -> Result<ClassSchedule> {
        let total = self.added_total();
        if ordered.len() < total + 1 {
            return Err(Error::Param(format!(
                "scenario {} needs at least {} classes, dataset has {}",
                self.name,
                total + 1,
                ordered.len()
            )));
        }
        let split = ordered.len() - total;
        let mut steps = Vec::new();
        let mut pos = split;
        for &n in self.step_sizes {
            steps.push(ordered[pos..pos + n].to_vec());
            pos += n;
        }
        ClassSchedule::new(ordered.to_vec(), ordered[..split].to_vec(), steps, ordering)
    }
}

const CATALOG: [NamedScenario; 6] = [
    NamedScenario { name: "add-last-1", step_sizes: &[1] },
    NamedScenario { name: "add-last-5-at-once", step_sizes: &[5] },
    NamedScenario { name: "add-last-10-at-once", step_sizes: &[10] },
    NamedScenario { name: "add-5-then-5", step_sizes: &[5, 5] },
    NamedScenario { name: "add-5-sequentially", step_sizes: &[1, 1, 1, 1, 1] },
    NamedScenario { name: "add-10-sequentially", step_sizes: &[1, 1, 1, 1, 1, 1, 1, 1, 1, 1] },
];

pub fn named_scenarios() -> &'static [NamedScenario] {
    &CATALOG
}

pub fn find_scenario(name: &str) -> Result<NamedScenario> {
    CATALOG.iter().copied().find(|s| s.name == name).ok_or_else(|| {
        let known: Vec<&str> = CATALOG.iter().map(|s| s.name).collect();
        Error::Param(format!("unknown scenario {name:?} (known: {})", known.join(", ")))
    })
}
