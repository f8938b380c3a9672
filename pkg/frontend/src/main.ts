// DOM layer: renders the session state machine and forwards reader input.
// Deliberately thin; all flow rules live in session.ts.

import { fetchNext, submitChoice } from "./api.js";
import { SessionController, type SessionState } from "./session.js";

const app = document.getElementById("app") as HTMLElement;
let pixelated = true;

function el(tag: string, className?: string, text?: string): HTMLElement {
  const node = document.createElement(tag);
  if (className) node.className = className;
  if (text !== undefined) node.textContent = text;
  return node;
}

function renderReaderPrompt(onReady: (reader: string) => void): void {
  app.replaceChildren();
  const box = el("div", "panel");
  box.appendChild(el("h1", undefined, "Image comparison session"));
  box.appendChild(
    el("p", undefined, "Enter your reader id to begin. Each pair asks one question: which image is more acceptable for diagnosis?"),
  );
  const input = document.createElement("input");
  input.type = "text";
  input.placeholder = "reader id";
  input.id = "reader-input";
  const button = el("button", "primary", "Start") as HTMLButtonElement;
  button.onclick = () => {
    const reader = input.value.trim();
    if (!reader) return;
    localStorage.setItem("usqm-reader", reader);
    onReady(reader);
  };
  input.onkeydown = (ev) => {
    if (ev.key === "Enter") button.click();
  };
  box.append(input, button);
  app.appendChild(box);
  input.focus();
}

function render(state: SessionState, controller: SessionController): void {
  app.replaceChildren();
  switch (state.phase) {
    case "loading": {
      app.appendChild(el("p", "status", "Loading next pair..."));
      return;
    }
    case "fatal": {
      const box = el("div", "panel");
      box.appendChild(el("h1", undefined, "Cannot reach the study server"));
      box.appendChild(el("p", "error-text", state.message));
      const retry = el("button", "primary", "Retry") as HTMLButtonElement;
      retry.onclick = () => void controller.start();
      box.appendChild(retry);
      app.appendChild(box);
      return;
    }
    case "done": {
      const box = el("div", "panel");
      box.appendChild(el("h1", undefined, "Session complete"));
      box.appendChild(
        el("p", undefined, `You answered ${state.answered} of ${state.total} pairs. Thank you.`),
      );
      app.appendChild(box);
      return;
    }
    case "image-error": {
      const box = el("div", "panel");
      box.appendChild(el("p", "error-text", "An image failed to load."));
      const retry = el("button", "primary", "Retry") as HTMLButtonElement;
      retry.onclick = () => controller.retryImages();
      box.appendChild(retry);
      app.appendChild(box);
      return;
    }
    case "trial":
    case "submitting": {
      const { trial, selected } = state;
      const header = el("div", "header");
      header.appendChild(
        el("span", "progress", `Pair ${trial.answered + 1} of ${trial.total}`),
      );
      const toggle = el("label", "toggle") as HTMLLabelElement;
      const check = document.createElement("input");
      check.type = "checkbox";
      check.checked = pixelated;
      check.onchange = () => {
        pixelated = check.checked;
        document
          .querySelectorAll(".trial-image")
          .forEach((img) => img.classList.toggle("pixelated", pixelated));
      };
      toggle.append(check, document.createTextNode(" pixel-accurate scaling"));
      header.appendChild(toggle);
      app.appendChild(header);

      const pairBox = el("div", "pair");
      (["A", "B"] as const).forEach((choice, idx) => {
        const side = el("div", "side" + (selected === choice ? " selected" : ""));
        const img = document.createElement("img");
        img.className = "trial-image" + (pixelated ? " pixelated" : "");
        img.src = idx === 0 ? trial.leftUrl : trial.rightUrl;
        img.alt = idx === 0 ? "left image" : "right image";
        img.draggable = false;
        img.onerror = () => controller.imagesFailed();
        img.onclick = () => controller.select(choice);
        side.appendChild(img);
        side.appendChild(el("div", "side-label", idx === 0 ? "Left" : "Right"));
        pairBox.appendChild(side);
      });
      app.appendChild(pairBox);

      const controls = el("div", "controls");
      if (state.phase === "submitting") {
        controls.appendChild(el("span", "status", "Saving..."));
      } else if (selected === null) {
        controls.appendChild(
          el("span", "hint", "Click an image or press the left/right arrow keys."),
        );
      } else {
        controls.appendChild(
          el("span", "hint", `Selected: ${selected === "A" ? "left" : "right"}.`),
        );
        const confirm = el("button", "primary", "Confirm choice") as HTMLButtonElement;
        confirm.onclick = () => void controller.confirm();
        const change = el("button", "secondary", "Change") as HTMLButtonElement;
        change.onclick = () => controller.clearSelection();
        controls.append(confirm, change);
      }
      if (state.phase === "trial" && state.lastError) {
        controls.appendChild(
          el("span", "error-text", `Submission failed (${state.lastError}); please confirm again.`),
        );
      }
      app.appendChild(controls);
      return;
    }
  }
}

function startSession(reader: string): void {
  const controller = new SessionController(reader, {
    fetchNext,
    submitChoice,
    now: () => performance.now(),
    onState: (state) => render(state, controller),
  });
  document.onkeydown = (ev) => {
    if (ev.key === "ArrowLeft") controller.select("A");
    else if (ev.key === "ArrowRight") controller.select("B");
    else if (ev.key === "Enter") void controller.confirm();
  };
  void controller.start();
}

// single-page flow: trap back navigation so a stray gesture cannot leave
// a half-answered session
history.pushState(null, "", location.href);
window.onpopstate = () => history.pushState(null, "", location.href);

const saved = localStorage.getItem("usqm-reader");
if (saved) {
  startSession(saved);
} else {
  renderReaderPrompt(startSession);
}
