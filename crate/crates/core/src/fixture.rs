//! The product-catalogue cleaning task used by the examples and acceptance tests.
//!
//! `df_raw` has 847 rows and 12 columns: 821 distinct products, 20 exact
//! duplicate rows and 6 rows without a `product_id`. Some prices are missing
//! (never the first one) and every price is in EUR.

use std::collections::BTreeMap;

use crate::agents::{PolicyAction, Role};
use crate::policies::{ContextPredicate, Script, ScriptStep, ScriptedPolicy};
use crate::sandbox::cellscript::{dedupe_by, drop_null_rows, fill_forward, scale_column};
use crate::schema::{Kind, ReturnField, Shape, SubTaskSeed, Table, TypeAnnotation, ValidationCondition, Value};

pub const TASK: &str = "Clean the raw product catalogue df_raw so prices are comparable across products.";
pub const SUBTASK_ID: &str = "clean_catalogue";
pub const DIRECTIVE: &str = "Remove duplicate rows by product_id. Forward-fill missing price values; \
drop rows where product_id is null. Convert all prices to USD using provided exchange rates.";
pub const SUMMARY: &str = "Deduplicated, forward-filled missing prices, converted to USD.";
pub const EUR_TO_USD: f64 = 1.08;

pub const UNIQUE_PRODUCTS: usize = 821;
pub const DUPLICATES: usize = 20;
pub const NULL_IDS: usize = 6;
pub const RAW_ROWS: usize = UNIQUE_PRODUCTS + DUPLICATES + NULL_IDS;

pub const COLUMNS: [&str; 12] = [
    "product_id",
    "name",
    "category",
    "price",
    "currency",
    "stock",
    "supplier",
    "region",
    "sku",
    "weight_kg",
    "rating",
    "updated_at",
];

pub const CELLS: [&str; 3] = [
    "let t2 = dedupe_by(df_raw, \"product_id\")",
    "let t3 = drop_null_rows(fill_forward(t2, \"price\"), \"product_id\")",
    "let df_clean = scale_column(t3, \"price\", exchange_rates[\"EUR\"])",
];

const CATEGORIES: [&str; 5] = ["audio", "garden", "kitchen", "office", "toys"];
const REGIONS: [&str; 4] = ["north", "south", "east", "west"];

fn product_row(id: usize) -> Vec<Value> {
    let n = id as i64;
    // Roughly one price in eleven is missing; product 1 always has one.
    let price = if id > 1 && id % 11 == 0 { Value::Null } else { Value::Float(5.0 + ((n * 37) % 400) as f64 * 0.25) };
    vec![
        Value::Int(n),
        Value::text(format!("product {id}")),
        Value::text(CATEGORIES[id % CATEGORIES.len()]),
        price,
        Value::text("EUR"),
        Value::Int((n * 13) % 250),
        Value::text(format!("supplier {}", id % 17)),
        Value::text(REGIONS[id % REGIONS.len()]),
        Value::text(format!("SKU-{id:05}")),
        Value::Float(0.1 + ((n * 7) % 90) as f64 * 0.1),
        Value::Float(1.0 + ((n * 3) % 41) as f64 * 0.1),
        Value::text(format!("2024-{:02}-{:02}", 1 + id % 12, 1 + id % 28)),
    ]
}

fn orphan_row(i: usize) -> Vec<Value> {
    let mut row = product_row(UNIQUE_PRODUCTS + 100 + i);
    row[0] = Value::Null;
    row
}

pub fn df_raw() -> Table {
    let mut rows = Vec::with_capacity(RAW_ROWS);
    let mut dup = 0;
    let mut orphan = 0;
    for id in 1..=UNIQUE_PRODUCTS {
        rows.push(product_row(id));
        // Duplicates of earlier rows spread through the table.
        if id % 40 == 20 && dup < DUPLICATES {
            rows.push(product_row(id - 7));
            dup += 1;
        }
        if id % 130 == 65 && orphan < NULL_IDS {
            rows.push(orphan_row(orphan));
            orphan += 1;
        }
    }
    while dup < DUPLICATES {
        rows.push(product_row(3 + dup));
        dup += 1;
    }
    while orphan < NULL_IDS {
        rows.push(orphan_row(orphan));
        orphan += 1;
    }
    Table::new(COLUMNS.iter().map(|c| c.to_string()).collect(), rows).expect("fixture rows are rectangular")
}

pub fn exchange_rates() -> Value {
    Value::Record(BTreeMap::from([("EUR".to_string(), Value::Float(EUR_TO_USD))]))
}

/// Environment artifacts a run starts with.
pub fn inputs() -> BTreeMap<String, Value> {
    BTreeMap::from([("df_raw".to_string(), Value::Table(df_raw())), ("exchange_rates".to_string(), exchange_rates())])
}

/// The cleaned table computed directly with the table builtins.
pub fn expected_clean() -> Table {
    let t2 = dedupe_by(&df_raw(), "product_id").expect("dedupe");
    let t3 = drop_null_rows(&fill_forward(&t2, "price").expect("fill"), "product_id").expect("drop");
    scale_column(&t3, "price", &Value::Float(EUR_TO_USD)).expect("scale")
}

pub fn returns() -> Vec<ReturnField> {
    vec![ReturnField::new("df_clean", TypeAnnotation::of_kind(Kind::Table))
        .with_condition(ValidationCondition::ShapeEquals(Shape { rows: UNIQUE_PRODUCTS, cols: COLUMNS.len() }))
        .with_condition(ValidationCondition::NoNullsInColumn("price".into()))
        .with_condition(ValidationCondition::NoNullsInColumn("product_id".into()))]
}

pub fn plan_action() -> PolicyAction {
    PolicyAction::PlanProposal {
        subtasks: vec![SubTaskSeed::new(SUBTASK_ID, "Clean the catalogue", "Deduplicate, fill prices, convert to USD")],
    }
}

pub fn spec_action() -> PolicyAction {
    PolicyAction::SpecProposal {
        directive: DIRECTIVE.into(),
        inputs: vec!["df_raw".into(), "exchange_rates".into()],
        returns: returns(),
    }
}

pub fn coder_steps() -> Vec<ScriptStep> {
    let mut steps: Vec<ScriptStep> = CELLS
        .iter()
        .map(|c| ScriptStep::new(Role::Coder, PolicyAction::Code { code: c.to_string() }))
        .collect();
    steps[0].when = ContextPredicate::Contains("df_raw: table 847×12".into());
    steps.push(ScriptStep::new(Role::Coder, PolicyAction::ResultReport { summary: SUMMARY.into(), diagnostics: None }));
    steps
}

/// The whole run: plan, specification, three cells and the report.
pub fn script_definition() -> Script {
    let mut steps = vec![
        ScriptStep::new(Role::Delegator, plan_action()),
        ScriptStep::new(Role::Delegator, spec_action()),
    ];
    steps.extend(coder_steps());
    Script { steps }
}

pub fn script() -> ScriptedPolicy {
    ScriptedPolicy::new(script_definition())
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use super::*;

    #[test]
    fn raw_table_has_the_advertised_composition() {
        let t = df_raw();
        assert_eq!((t.n_rows(), t.n_cols()), (RAW_ROWS, 12));
        assert_eq!(RAW_ROWS, 847);
        let ids: Vec<&Value> = t.rows().iter().map(|r| &r[0]).collect();
        assert_eq!(ids.iter().filter(|v| v.is_null()).count(), NULL_IDS);
        let distinct: BTreeSet<i64> =
            ids.iter().filter_map(|v| if let Value::Int(i) = v { Some(*i) } else { None }).collect();
        assert_eq!(distinct.len(), UNIQUE_PRODUCTS);
        assert!(!t.rows()[0][3].is_null());
        assert!(t.rows().iter().any(|r| r[3].is_null()));
        assert!(t.rows().iter().all(|r| r[4] == Value::text("EUR")));
    }

    #[test]
    fn duplicates_are_exact_copies() {
        let t = df_raw();
        let mut seen = BTreeMap::new();
        for row in t.rows().iter().filter(|r| !r[0].is_null()) {
            if let Some(first) = seen.insert(row[0].to_string(), row.clone()) {
                assert_eq!(&first, row);
            }
        }
    }

    #[test]
    fn expected_clean_is_821_by_12_without_nulls() {
        let t = expected_clean();
        assert_eq!((t.n_rows(), t.n_cols()), (821, 12));
        assert!(t.column_has_no_nulls("price"));
        assert!(t.column_has_no_nulls("product_id"));
        assert!(t.rows()[0][3].approx_eq(&Value::Float(product_price(1) * EUR_TO_USD)));
    }

    fn product_price(id: i64) -> f64 {
        5.0 + ((id * 37) % 400) as f64 * 0.25
    }
}
