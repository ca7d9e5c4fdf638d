//! Replays the bundled scenario suite with and without feedback.

use chatplan::bench::{bundled_replay_scripts, bundled_scenarios, render_report, run_suite, ReportFormat, SuiteConfig};

fn main() {
    let scenarios = bundled_scenarios();
    let scripts = bundled_replay_scripts();

    let first = run_suite(&scenarios, &scripts, &SuiteConfig::virtualhome(5, 0));
    print!("{}", render_report(&first, ReportFormat::Markdown));

    let with_feedback = run_suite(&scenarios, &scripts, &SuiteConfig::virtualhome(1, 5));
    println!("feedback rounds: {:?}", with_feedback.rounds_vector());
    println!("{}", with_feedback.rate_line());
}
