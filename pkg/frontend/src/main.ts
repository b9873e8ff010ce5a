/** Page entry point: the service base URL comes from the `service` query
 * parameter, falling back to same-origin. */

import { StudyClient } from "./api.js";
import { createApp } from "./app.js";

const params = new URLSearchParams(window.location.search);
const base = params.get("service") ?? "";
const root = document.getElementById("app");
if (root === null) {
  throw new Error("page has no #app element");
}
createApp(root, new StudyClient(base))
  .run()
  .catch((failure) => {
    console.error(failure);
  });
