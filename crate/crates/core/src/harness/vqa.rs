//! Visual question answering export: one yes/no prompt per ordered instance
//! pair and task.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::order::{SceneAnnotation, FRONT};

pub const OCCLUSION_RELATION: &str = "obstructing";
pub const DEPTH_RELATION: &str = "closer to us than";
pub const INSTRUCTION: &str = "Answer the question in a single word.";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VqaTask {
    Occlusion,
    Depth,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VqaRecord {
    pub image: String,
    pub question: String,
    pub answer: String,
    pub pair: [usize; 2],
    pub task: VqaTask,
}

/// `"[0.12, 0.34, 0.56, 0.78]"`, corners in `[0,1]`.
pub fn format_bbox(b: &[f64; 4]) -> String {
    format!("[{:.2}, {:.2}, {:.2}, {:.2}]", b[0], b[1], b[2], b[3])
}

/// Names of the instances as used in prompts: the category alone, followed
/// by the normalized box when the category occurs more than once.
pub fn referring_names(ann: &SceneAnnotation) -> Result<Vec<String>> {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for inst in &ann.instances {
        if inst.category.trim().is_empty() {
            return Err(Error::Data(format!("instance {} has no category", inst.id)));
        }
        *counts.entry(inst.category.as_str()).or_default() += 1;
    }
    Ok(ann
        .instances
        .iter()
        .map(|inst| {
            if counts[inst.category.as_str()] > 1 {
                format!("{} {}", inst.category, format_bbox(&inst.bbox))
            } else {
                inst.category.clone()
            }
        })
        .collect())
}

pub fn question(a: &str, relation: &str, b: &str) -> String {
    format!("Is the {a} {relation} the {b} ? {INSTRUCTION}")
}

/// All `2·n(n−1)` prompts of a scene: occlusion prompts for every ordered
/// pair, then depth prompts. Depth answers "yes" only for strict "in front
/// of"; an overlapping pair answers "no" both ways.
pub fn vqa_export(ann: &SceneAnnotation, image: &str) -> Result<Vec<VqaRecord>> {
    let names = referring_names(ann)?;
    let n = ann.n();
    let mut out = Vec::with_capacity(2 * n * n.saturating_sub(1));
    for task in [VqaTask::Occlusion, VqaTask::Depth] {
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let (relation, yes) = match task {
                    VqaTask::Occlusion => (OCCLUSION_RELATION, ann.occlusion.occludes(i, j)),
                    VqaTask::Depth => (DEPTH_RELATION, ann.depth.get(i, j) == FRONT),
                };
                out.push(VqaRecord {
                    image: image.to_string(),
                    question: question(&names[i], relation, &names[j]),
                    answer: if yes { "yes" } else { "no" }.into(),
                    pair: [i, j],
                    task,
                });
            }
        }
    }
    Ok(out)
}

/// One JSON object per line.
pub fn to_jsonl(records: &[VqaRecord]) -> String {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r).expect("record serializes"));
        s.push('\n');
    }
    s
}
