from fastapi import FastAPI, Request
from fastapi.responses import HTMLResponse
from fastapi.templating import Jinja2Templates
from dotenv import load_dotenv

# Load environment variables from .env file
load_dotenv()
from api.experiment_router import router as experiment_router
from api.utils import version_string
from services.experiment_service import RUNNERS, load_settings

app = FastAPI(title="Holonomy Measures API")

# Templates
templates = Jinja2Templates(directory="templates")

app.include_router(experiment_router)


@app.get("/", response_class=HTMLResponse)
async def read_root(request: Request):
    return templates.TemplateResponse("index.html", {
        "request": request,
        "subcommands": list(RUNNERS) + ["selftest"],
        "version": version_string(),
        "settings": load_settings(),
    })


if __name__ == "__main__":
    import uvicorn
    print("🚀 Starting Holonomy Measures API server...")
    print("📍 Server will be available at: http://localhost:8000")
    print("🧪 Experiments: POST http://localhost:8000/experiments/{subcommand}")
    uvicorn.run(app, host="0.0.0.0", port=8000, reload=True)
