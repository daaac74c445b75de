# main_easy.py - Easy pipeline run with config.py

from pathlib import Path

from dotenv import load_dotenv

from config import get_current_config, print_current_config
from ppslab.configuration import Configuration, EnvironmentConfig
from ppslab.debug_utils import analyze_acceptance, print_acceptance_report
from ppslab.errors import StageFailure
from ppslab.pipeline import STAGES, RunContext, run_pipeline

load_dotenv()


def run_easy_pipeline():
    """Run the developmental pipeline with the preset from config.py."""

    print("🚀 EASY PPS DEVELOPMENTAL RUN")
    print("=" * 80)

    config = get_current_config()
    print_current_config()

    ok, message = EnvironmentConfig.validate_setup()
    print(f"\n🔧 Environment: {'✅' if ok else '⚠️ '} {message}")

    print("\n❓ Run the pipeline with this configuration?")
    confirm = input("Press ENTER to continue or 'q' to quit: ").strip().lower()
    if confirm == "q":
        print("❌ Run cancelled")
        return

    if config["config_file"]:
        experiment = Configuration.from_file(config["config_file"])
    else:
        experiment = Configuration.from_runnable_config({"configurable": config["configurable"]})

    stages = STAGES if config["emit_figures"] else STAGES[:-1]
    try:
        reports = run_pipeline(experiment, stages)
    except StageFailure as e:
        print(f"❌ {e.message}")
        return

    show_results_summary(reports)
    if config["print_acceptance"]:
        run = RunContext(experiment, Path(experiment.out_dir))
        loaded = {name: r for name in STAGES if (r := run.report(name)) is not None}
        print_acceptance_report(analyze_acceptance(loaded), experiment.out_dir)

    print("\n🎉 EASY RUN COMPLETE!")


def show_results_summary(reports):
    """Show a summary of the stage reports."""

    print("\n📊 RESULTS SUMMARY:")
    print("=" * 50)
    for report in reports:
        print(f"   {report.stage:<16} {report.wall_clock:7.1f}s  {len(report.rows):4d} rows")
        if report.stage == "reach_ladder":
            for s in report.tables.get("summary", []):
                print(f"      🎯 {s['policy']:<18} {s['bumps_final']}/{s['trials']} final-node bumps")
        for s in report.tables.get("grasp_summary", []):
            print(f"      ✋ {s['method']:<18} {s['grasp']}/{s['n']} grasps ({s['set']})")


if __name__ == "__main__":
    run_easy_pipeline()
