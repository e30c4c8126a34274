use std::io::{self, Write};

use serde::{Deserialize, Serialize};

use super::{NodeId, Time};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TraceLevel {
    #[default]
    Off,
    Full,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub time: Time,
    pub kind: String,
    pub src: Option<NodeId>,
    pub dst: Option<NodeId>,
    pub summary: String,
}

#[derive(Clone, Debug, Default)]
pub struct Trace {
    level: TraceLevel,
    events: Vec<TraceEvent>,
}

impl Trace {
    pub fn new(level: TraceLevel) -> Self {
        Trace {
            level,
            events: Vec::new(),
        }
    }

    pub fn enabled(&self) -> bool {
        self.level == TraceLevel::Full
    }

    pub(crate) fn record(
        &mut self,
        time: Time,
        kind: &str,
        src: Option<NodeId>,
        dst: Option<NodeId>,
        summary: impl FnOnce() -> String,
    ) {
        if self.enabled() {
            self.events.push(TraceEvent {
                time,
                kind: kind.to_string(),
                src,
                dst,
                summary: summary(),
            });
        }
    }

    pub fn events(&self) -> &[TraceEvent] {
        &self.events
    }

    pub fn kinds<'a>(&'a self, kind: &'a str) -> impl Iterator<Item = &'a TraceEvent> + 'a {
        self.events.iter().filter(move |e| e.kind == kind)
    }

    /// One JSON object per line.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> io::Result<()> {
        for e in &self.events {
            serde_json::to_writer(&mut out, e)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("serde_json emits UTF-8")
    }
}
