//! Push-driven pipeline evaluation.
//!
//! A [`StreamProcessor`] accepts one [`StreamItem`] per [`post`](StreamProcessor::post)
//! and answers with at most one output. `map` and `where` stages run first;
//! an optional reducer folds survivors and emits when its window closes.

mod reducer;

pub use reducer::histogram;

use crate::dsl::{evaluate, EvalError, Lambda, Pipeline, Stage, StageScope, WindowMode};
use crate::value::Value;

use reducer::Reducer;

#[derive(Debug, Clone, PartialEq)]
pub struct StreamItem {
    pub value: Value,
    /// Closes the current host-defined group.
    pub group_end: bool,
    pub seq: u64,
    /// Seconds since the Unix epoch.
    pub t_wall: f64,
}

impl StreamItem {
    pub fn new(value: Value) -> Self {
        StreamItem { value, group_end: false, seq: 0, t_wall: 0.0 }
    }

    pub fn group_end(mut self, b: bool) -> Self {
        self.group_end = b;
        self
    }

    pub fn at(mut self, seq: u64, t_wall: f64) -> Self {
        self.seq = seq;
        self.t_wall = t_wall;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Output {
    Emit(Value),
    Silent,
    Error(EvalError),
}

#[derive(Debug, Clone)]
enum PreStage {
    Map(Lambda),
    Where(Lambda),
}

#[derive(Debug, Clone)]
pub struct StreamProcessor {
    stages: Vec<PreStage>,
    reducer: Option<Reducer>,
}

impl StreamProcessor {
    pub fn new(pipeline: &Pipeline) -> Self {
        let stages = pipeline
            .stages
            .iter()
            .filter_map(|s| match s {
                Stage::Map(l) => Some(PreStage::Map(l.clone())),
                Stage::Where(l) => Some(PreStage::Where(l.clone())),
                _ => None,
            })
            .collect();
        let reducer = pipeline.reduce().map(|(agg, l)| Reducer::new(agg, l.cloned(), pipeline.window()));
        StreamProcessor { stages, reducer }
    }

    pub fn has_reducer(&self) -> bool {
        self.reducer.is_some()
    }

    pub fn window(&self) -> WindowMode {
        self.reducer.as_ref().map_or(WindowMode::Group, Reducer::window)
    }

    /// Number of values folded into the open window.
    pub fn pending(&self) -> u64 {
        self.reducer.as_ref().map_or(0, Reducer::pending)
    }

    pub fn post(&mut self, item: &StreamItem) -> Output {
        let event = item.value.as_record();
        let mut current: Option<Value> = None;
        for stage in &self.stages {
            let value = current.as_ref().unwrap_or(&item.value);
            match stage {
                PreStage::Map(l) => {
                    let scope = StageScope { binder: &l.binder, value, event };
                    match evaluate(&l.body, &scope) {
                        Ok(v) => current = Some(v),
                        Err(e) => return Output::Error(e),
                    }
                }
                PreStage::Where(l) => {
                    let scope = StageScope { binder: &l.binder, value, event };
                    match evaluate(&l.body, &scope) {
                        Ok(Value::Bool(true)) => {}
                        Ok(Value::Bool(false)) => return self.filtered(item),
                        Ok(other) => {
                            return Output::Error(EvalError::new(format!(
                                "where() predicate must be bool, got {}",
                                other.kind()
                            )))
                        }
                        Err(e) => return Output::Error(e),
                    }
                }
            }
        }
        let value = current.unwrap_or_else(|| item.value.clone());
        match &mut self.reducer {
            None => Output::Emit(value),
            Some(r) => match r.accept(value, event, item) {
                Ok(Some(v)) => Output::Emit(v),
                Ok(None) => Output::Silent,
                Err(e) => Output::Error(e),
            },
        }
    }

    /// A filtered item still closes its group in `Group` mode.
    fn filtered(&mut self, item: &StreamItem) -> Output {
        match &mut self.reducer {
            Some(r) if item.group_end && r.window() == WindowMode::Group => r.close().map_or(Output::Silent, Output::Emit),
            _ => Output::Silent,
        }
    }

    /// Stream close: count and time windows emit their partial aggregate,
    /// incomplete host-defined groups are dropped.
    pub fn flush(&mut self) -> Output {
        match &mut self.reducer {
            Some(r) if r.window() != WindowMode::Group => r.close().map_or(Output::Silent, Output::Emit),
            Some(r) => {
                r.reset();
                Output::Silent
            }
            None => Output::Silent,
        }
    }
}
