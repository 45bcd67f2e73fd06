use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Response,
    Explanatory,
    Gender,
    Area,
    Weight,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    #[default]
    Continuous,
    Categorical,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Variable {
    pub name: String,
    pub role: Role,
    #[serde(default)]
    pub kind: Kind,
    /// Levels of a categorical variable. For the gender variable this is
    /// `[men_label, women_label]`; for the area variable it optionally restricts
    /// the admissible codes.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub categories: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<String>,
}

impl Variable {
    pub fn continuous(name: &str) -> Self {
        Variable {
            name: name.into(),
            role: Role::Explanatory,
            kind: Kind::Continuous,
            categories: Vec::new(),
            reference: None,
        }
    }

    pub fn categorical(name: &str, categories: &[&str], reference: &str) -> Self {
        Variable {
            name: name.into(),
            role: Role::Explanatory,
            kind: Kind::Categorical,
            categories: categories.iter().map(|s| s.to_string()).collect(),
            reference: Some(reference.into()),
        }
    }

    pub fn with_role(name: &str, role: Role) -> Self {
        Variable {
            name: name.into(),
            role,
            kind: Kind::Continuous,
            categories: Vec::new(),
            reference: None,
        }
    }

    pub fn level_index(&self, value: &str) -> Option<usize> {
        self.categories.iter().position(|c| c == value)
    }

    /// Index of the reference level. Only meaningful for validated
    /// categorical explanatory variables.
    pub fn reference_index(&self) -> usize {
        self.reference
            .as_deref()
            .and_then(|r| self.level_index(r))
            .unwrap_or(0)
    }
}

/// Variable definitions for a wage survey: one response, one gender, one
/// area, an optional weight column, and any number of explanatory variables.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariableSchema {
    pub variables: Vec<Variable>,
}

impl VariableSchema {
    pub fn new(variables: Vec<Variable>) -> Result<Self> {
        let schema = VariableSchema { variables };
        schema.validate()?;
        Ok(schema)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let schema: VariableSchema = serde_json::from_str(text)?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        for role in [Role::Response, Role::Gender, Role::Area] {
            let count = self.variables.iter().filter(|v| v.role == role).count();
            if count != 1 {
                problems.push(format!("expected exactly one {role:?} variable, found {count}"));
            }
        }
        let weights = self.variables.iter().filter(|v| v.role == Role::Weight).count();
        if weights > 1 {
            problems.push(format!("at most one weight variable allowed, found {weights}"));
        }
        let mut names: Vec<&str> = self.variables.iter().map(|v| v.name.as_str()).collect();
        names.sort_unstable();
        for w in names.windows(2).filter(|w| w[0] == w[1]) {
            problems.push(format!("duplicate variable `{}`", w[0]));
        }
        for v in &self.variables {
            match v.role {
                Role::Gender => {
                    if v.categories.len() != 2 || v.categories[0] == v.categories[1] {
                        problems.push(format!(
                            "gender variable `{}` needs two distinct categories [men, women]",
                            v.name
                        ));
                    }
                }
                Role::Explanatory if v.kind == Kind::Categorical => {
                    if v.categories.len() < 2 {
                        problems.push(format!("categorical `{}` needs at least two levels", v.name));
                    }
                    match &v.reference {
                        None => problems.push(format!("categorical `{}` has no reference level", v.name)),
                        Some(r) if v.level_index(r).is_none() => problems.push(format!(
                            "reference `{r}` of `{}` is not one of its levels",
                            v.name
                        )),
                        _ => {}
                    }
                    let mut levels: Vec<&String> = v.categories.iter().collect();
                    levels.sort_unstable();
                    if levels.windows(2).any(|w| w[0] == w[1]) {
                        problems.push(format!("categorical `{}` repeats a level", v.name));
                    }
                }
                Role::Area => {
                    if let Some(r) = &v.reference {
                        if !v.categories.is_empty() && v.level_index(r).is_none() {
                            problems.push(format!("area reference `{r}` is not a listed code"));
                        }
                    }
                }
                _ => {}
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Schema(problems.join("; ")))
        }
    }

    fn by_role(&self, role: Role) -> &Variable {
        self.variables
            .iter()
            .find(|v| v.role == role)
            .expect("validated schema has this role")
    }

    pub fn response(&self) -> &Variable {
        self.by_role(Role::Response)
    }

    pub fn gender(&self) -> &Variable {
        self.by_role(Role::Gender)
    }

    pub fn area(&self) -> &Variable {
        self.by_role(Role::Area)
    }

    pub fn weight(&self) -> Option<&Variable> {
        self.variables.iter().find(|v| v.role == Role::Weight)
    }

    /// Explanatory variables in declaration order; record covariates follow
    /// this order.
    pub fn explanatory(&self) -> impl Iterator<Item = &Variable> {
        self.variables.iter().filter(|v| v.role == Role::Explanatory)
    }

    pub fn explanatory_index(&self, name: &str) -> Option<usize> {
        self.explanatory().position(|v| v.name == name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> Vec<Variable> {
        vec![
            Variable::with_role("wage", Role::Response),
            Variable {
                categories: vec!["M".into(), "F".into()],
                ..Variable::with_role("sex", Role::Gender)
            },
            Variable::with_role("nace", Role::Area),
        ]
    }

    #[test]
    fn valid_schema_round_trips_through_json() {
        let mut vars = base();
        vars.push(Variable::categorical("edu", &["Primary", "Secondary", "Higher"], "Primary"));
        let schema = VariableSchema::new(vars).unwrap();
        let text = serde_json::to_string(&schema).unwrap();
        assert_eq!(VariableSchema::from_json(&text).unwrap(), schema);
        assert_eq!(schema.explanatory_index("edu"), Some(0));
    }

    #[test]
    fn reports_every_problem() {
        let mut vars = base();
        vars.pop();
        vars.push(Variable {
            reference: None,
            ..Variable::categorical("edu", &["a", "b"], "a")
        });
        let err = VariableSchema::new(vars).unwrap_err().to_string();
        assert!(err.contains("Area"), "{err}");
        assert!(err.contains("no reference"), "{err}");
    }

    #[test]
    fn reference_must_be_a_level() {
        let mut vars = base();
        vars.push(Variable::categorical("edu", &["a", "b"], "c"));
        assert!(VariableSchema::new(vars).is_err());
    }
}
