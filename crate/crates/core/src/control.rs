//! Control documents exchanged between the deployment engine and its tools:
//! to-do lists going out, task reports coming back.

use std::collections::HashSet;

use crate::doc::{self, Element};
use crate::error::{Error, Result};

pub const TODO_DATUM: &str = "ToDoList";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TaskType {
    Install,
    Fire,
    Wire,
}

impl TaskType {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskType::Install => "INSTALL",
            TaskType::Fire => "FIRE",
            TaskType::Wire => "WIRE",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "INSTALL" => Ok(TaskType::Install),
            "FIRE" => Ok(TaskType::Fire),
            "WIRE" => Ok(TaskType::Wire),
            other => Err(Error::malformed(format!("unknown task type {other:?}"))),
        }
    }
}

/// Ordered `(id, value)` pairs; ids need not be unique but lookups take the first.
pub type Datums = Vec<(String, String)>;

fn lookup<'a>(datums: &'a Datums, id: &str) -> Option<&'a str> {
    datums.iter().find(|(k, _)| k == id).map(|(_, v)| v.as_str())
}

fn datums_of(e: &Element) -> Result<Datums> {
    e.elements()
        .map(|d| {
            d.expect_name("datum")?;
            Ok((d.required_attr("id")?.to_string(), d.text().trim().to_string()))
        })
        .collect()
}

fn push_datums(e: &mut Element, datums: &Datums) {
    for (id, v) in datums {
        e.push(Element::new("datum").with_attr("id", id).with_text(v));
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Task {
    pub guid: String,
    pub task_type: TaskType,
    pub datums: Datums,
}

impl Task {
    pub fn new(guid: impl Into<String>, task_type: TaskType) -> Self {
        Task {
            guid: guid.into(),
            task_type,
            datums: Vec::new(),
        }
    }

    pub fn with(mut self, id: impl Into<String>, value: impl Into<String>) -> Self {
        self.datums.push((id.into(), value.into()));
        self
    }

    pub fn datum(&self, id: &str) -> Option<&str> {
        lookup(&self.datums, id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ToDoList {
    pub tasks: Vec<Task>,
}

impl ToDoList {
    pub fn new(tasks: Vec<Task>) -> Self {
        ToDoList { tasks }
    }

    pub fn to_element(&self) -> Element {
        let mut root = Element::new("ToDoList");
        for t in &self.tasks {
            let mut e = Element::new("Task")
                .with_attr("guid", &t.guid)
                .with_attr("type", t.task_type.as_str());
            push_datums(&mut e, &t.datums);
            root.push(e);
        }
        root
    }

    pub fn to_xml(&self) -> String {
        self.to_element().to_canonical_string()
    }

    pub fn from_element(e: &Element) -> Result<Self> {
        e.expect_name("ToDoList")?;
        let mut seen = HashSet::new();
        let mut tasks = Vec::new();
        for t in e.elements() {
            t.expect_name("Task")?;
            let guid = t.required_attr("guid")?.trim().to_string();
            if !seen.insert(guid.clone()) {
                return Err(Error::malformed(format!("duplicate task guid {guid:?}")));
            }
            tasks.push(Task {
                guid,
                task_type: TaskType::parse(t.required_attr("type")?)?,
                datums: datums_of(t)?,
            });
        }
        Ok(ToDoList { tasks })
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_element(&doc::parse_str(text)?)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskOutcome {
    pub guid: String,
    pub success: bool,
    pub datums: Datums,
}

impl TaskOutcome {
    pub fn ok(guid: impl Into<String>) -> Self {
        TaskOutcome {
            guid: guid.into(),
            success: true,
            datums: Vec::new(),
        }
    }

    /// A failed outcome carrying the error's wire code as its `Error` datum.
    pub fn failed(guid: impl Into<String>, error: &Error) -> Self {
        TaskOutcome {
            guid: guid.into(),
            success: false,
            datums: vec![
                ("Error".into(), error.code().to_string()),
                ("Message".into(), error.to_string()),
            ],
        }
    }

    /// A failed outcome with an explicit wire code.
    pub fn failed_with(guid: impl Into<String>, code: u16, message: impl Into<String>) -> Self {
        TaskOutcome {
            guid: guid.into(),
            success: false,
            datums: vec![
                ("Error".into(), code.to_string()),
                ("Message".into(), message.into()),
            ],
        }
    }

    pub fn with(mut self, id: impl Into<String>, value: impl Into<String>) -> Self {
        self.datums.push((id.into(), value.into()));
        self
    }

    pub fn datum(&self, id: &str) -> Option<&str> {
        lookup(&self.datums, id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TaskReport {
    pub outcomes: Vec<TaskOutcome>,
}

impl TaskReport {
    pub fn to_element(&self) -> Element {
        let mut root = Element::new("TaskReport");
        for o in &self.outcomes {
            let mut e = Element::new("TaskOutcome")
                .with_attr("guid", &o.guid)
                .with_attr("success", if o.success { "TRUE" } else { "FALSE" });
            push_datums(&mut e, &o.datums);
            root.push(e);
        }
        root
    }

    pub fn to_xml(&self) -> String {
        self.to_element().to_canonical_string()
    }

    pub fn from_element(e: &Element) -> Result<Self> {
        e.expect_name("TaskReport")?;
        let outcomes = e
            .elements()
            .map(|o| {
                o.expect_name("TaskOutcome")?;
                let success = match o.required_attr("success")?.trim() {
                    s if s.eq_ignore_ascii_case("TRUE") => true,
                    s if s.eq_ignore_ascii_case("FALSE") => false,
                    s => return Err(Error::malformed(format!("success={s:?}"))),
                };
                Ok(TaskOutcome {
                    guid: o.required_attr("guid")?.trim().to_string(),
                    success,
                    datums: datums_of(o)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(TaskReport { outcomes })
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_element(&doc::parse_str(text)?)
    }

    pub fn outcome(&self, guid: &str) -> Option<&TaskOutcome> {
        self.outcomes.iter().find(|o| o.guid == guid)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TODO: &str = r#"<ToDoList>
  <Task guid="urn:gloss:aEcncdeEe" type="INSTALL">
    <datum id="PayloadRef">urn:gloss:a222jdjd2s</datum>
  </Task>
  <Task guid="urn:gloss:aBcbcdebe" type="INSTALL">
    <datum id="PayloadRef">urn:gloss:b333jdjd2s</datum>
  </Task>
</ToDoList>"#;

    const REPORT: &str = r#"<TaskReport>
  <TaskOutcome guid="urn:gloss:aEcncdeEe" success="TRUE">
    <!-- TaskOutcomes can have zero, one or many datum
         elements which are bindings and data this
         permits any application specific information
         to be sent back to the Deployment Engine -->
    <datum id="StoreGuid">AECJCJDKSKDLJDJSUVDJD</datum>
  </TaskOutcome>
  <TaskOutcome guid="urn:gloss:aBcbcdebe" success="FALSE">
    <datum id="Error">403</datum>
  </TaskOutcome>
</TaskReport>"#;

    #[test]
    fn example_to_do_list_parses() {
        let t = ToDoList::parse(TODO).unwrap();
        assert_eq!(t.tasks.len(), 2);
        assert_eq!(t.tasks[0].task_type, TaskType::Install);
        assert_eq!(t.tasks[1].datum("PayloadRef"), Some("urn:gloss:b333jdjd2s"));
        assert_eq!(ToDoList::parse(&t.to_xml()).unwrap(), t);
    }

    #[test]
    fn example_report_parses() {
        let r = TaskReport::parse(REPORT).unwrap();
        assert!(r.outcomes[0].success);
        assert_eq!(r.outcomes[0].datum("StoreGuid"), Some("AECJCJDKSKDLJDJSUVDJD"));
        assert!(!r.outcomes[1].success);
        assert_eq!(r.outcome("urn:gloss:aBcbcdebe").unwrap().datum("Error"), Some("403"));
        assert_eq!(TaskReport::parse(&r.to_xml()).unwrap(), r);
    }

    #[test]
    fn padded_datum_text_is_trimmed() {
        let t = ToDoList::parse(
            "<ToDoList><Task guid=\"g\" type=\"INSTALL\"><datum id=\"PayloadRef\">\n   urn:gloss:a222jdjd2s\n </datum></Task></ToDoList>",
        )
        .unwrap();
        assert_eq!(t.tasks[0].datum("PayloadRef"), Some("urn:gloss:a222jdjd2s"));
    }

    #[test]
    fn rejects_duplicate_guids_and_unknown_types() {
        assert!(ToDoList::parse(
            "<ToDoList><Task guid=\"a\" type=\"FIRE\"/><Task guid=\"a\" type=\"FIRE\"/></ToDoList>"
        )
        .is_err());
        assert!(ToDoList::parse("<ToDoList><Task guid=\"a\" type=\"EAT\"/></ToDoList>").is_err());
    }

    #[test]
    fn failed_outcome_carries_code() {
        let e = Error::PermissionDenied {
            entity: "x".into(),
            right: "STORE_PUT".into(),
        };
        assert_eq!(TaskOutcome::failed("g", &e).datum("Error"), Some("403"));
    }
}
