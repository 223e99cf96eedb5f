#!/usr/bin/env python3
"""
Setup script for the holonomy experiment environment
"""

import os
from pathlib import Path


def create_env_file():
    """Create .env file with the default HOLONOMY_* settings"""

    env_content = """# Default output directory for CLI runs
HOLONOMY_OUT_DIR=out

# Worker processes for loop sampling (results do not depend on this)
HOLONOMY_WORKERS=1

# Logging level (DEBUG, INFO, WARNING, ERROR)
HOLONOMY_LOG_LEVEL=INFO

# Truncation tolerance of heat-kernel series
HOLONOMY_HK_TOLERANCE=1e-12

# Loops per sampling chunk (part of the random stream layout)
HOLONOMY_CHUNK_SIZE=2048
"""

    env_file = Path('.env')

    if env_file.exists():
        print("⚠️  .env file already exists. Backing up to .env.backup")
        env_file.rename('.env.backup')

    with open('.env', 'w') as f:
        f.write(env_content)

    print("✅ .env file created successfully!")
    print("📝 You can now run: python run_experiment.py selftest")


def check_settings():
    """Load the .env file and validate the settings"""
    try:
        from dotenv import load_dotenv
        from services.experiment_service import load_settings

        load_dotenv()
        settings = load_settings()
        print(f"✅ Settings OK: workers={settings.workers}, chunk_size={settings.chunk_size}, "
              f"out_dir={settings.out_dir}")
        return True

    except Exception as e:
        print(f"❌ Invalid settings: {e}")
        return False


if __name__ == "__main__":
    print("🛠️  Setting up holonomy experiment environment...")
    create_env_file()
    print("\n🧪 Checking settings...")
    if check_settings():
        print("\n🎉 Setup complete!")
    else:
        print(f"\n⚠️  Fix the values in {os.path.abspath('.env')} and run again.")
