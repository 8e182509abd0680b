//! Loading observational data from CSV with a schema, then validating it.

use encourage::data::{load_dataset, validate, Schema};

const DATA: &str = "\
age,site,offered,enrolled,visits
34,north,1,1,1
51,north,0,0,0
29,south,1,0,0
45,south,0,1,1
38,north,1,1,0
62,south,1,1,1
";

fn main() -> encourage::Result<()> {
    let schema = Schema::parse("group=site\nr=offered\nt=enrolled\ny=visits\ncovariates=age\n")?;
    let ds = load_dataset(DATA.as_bytes(), &schema)?;
    println!("{} rows, groups {:?}, covariates {:?}", ds.n(), ds.group_set(), ds.covariate_names());

    let report = validate(&ds);
    println!("P(R=1 | group): {:?}", report.p_r1_given_a);
    println!("empty (r, group) cells: {:?}", report.empty_cells);

    let bad = Schema { y: "outcome".into(), ..schema };
    match load_dataset(DATA.as_bytes(), &bad) {
        Err(e) => println!("wrong schema: {e}"),
        Ok(_) => unreachable!("the column does not exist"),
    }
    Ok(())
}
